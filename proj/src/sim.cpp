#include "statetrace/sim.hpp"

#include "statetrace/common.hpp"
#include "statetrace/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace statetrace::sim {

namespace {
constexpr double kDt = 0.2;          // 5 Hz control loop
constexpr double kKtToMs = 0.514444;
constexpr double kMsToFtps = 3.28084;
constexpr double kG = 9.80665;
constexpr double kDeg = 180.0 / M_PI;

double wrap_deg(double a) {
    a = std::fmod(a + 180.0, 360.0);
    if (a < 0) a += 360.0;
    return a - 180.0;
}
} // namespace

// ---------------------------------------------------------------------------
// Flight plans

std::string to_string(CommandKind kind) {
    switch (kind) {
        case CommandKind::Takeoff: return "takeoff";
        case CommandKind::Climb: return "climb";
        case CommandKind::Cruise: return "cruise";
        case CommandKind::GotoWaypoint: return "goto_waypoint";
        case CommandKind::Loiter: return "loiter";
        case CommandKind::Descend: return "descend";
        case CommandKind::Approach: return "approach";
        case CommandKind::Land: return "land";
    }
    return "?";
}

void FlightPlan::validate() const {
    if (commands.empty()) throw std::invalid_argument("flight plan is empty");
    if (commands.front().kind != CommandKind::Takeoff)
        throw std::invalid_argument("flight plan must start with takeoff");
    if (commands.back().kind != CommandKind::Land)
        throw std::invalid_argument("flight plan must end with land");
    for (const auto& c : commands) {
        if ((c.kind == CommandKind::Climb || c.kind == CommandKind::Descend) && !(c.a > 0))
            throw std::invalid_argument("altitude targets must be positive");
        if (c.kind == CommandKind::GotoWaypoint && !(std::isfinite(c.a) && std::isfinite(c.b)))
            throw std::invalid_argument("waypoint coordinates must be finite");
        if ((c.kind == CommandKind::Cruise || c.kind == CommandKind::Loiter) && !(c.a > 0))
            throw std::invalid_argument("durations must be positive");
    }
}

namespace {

/// Ground-truth states each command kind contributes (coarse names).
std::vector<std::string> induced_states(CommandKind kind) {
    switch (kind) {
        case CommandKind::Takeoff: return {"takeoff_roll", "initial_climb"};
        case CommandKind::Climb: return {"climb"};
        case CommandKind::Cruise: return {"cruise"};
        case CommandKind::GotoWaypoint: return {"turn", "track"};
        case CommandKind::Loiter: return {"loiter"};
        case CommandKind::Descend: return {"descend"};
        case CommandKind::Approach: return {"approach"};
        case CommandKind::Land: return {"flare", "rollout"};
    }
    return {};
}

} // namespace

FlightPlan generate_flight_plan(std::uint64_t seed, const PlanConstraints& c) {
    if (c.min_commands < 3 || c.max_commands < c.min_commands)
        throw std::invalid_argument("unsatisfiable plan constraints: need 3 <= min <= max commands");
    RngStream rng = RngStream::substream(seed, "plan");

    const int n = c.min_commands +
                  static_cast<int>(rng.uniform_int(c.max_commands - c.min_commands + 1));
    const bool has_approach = n >= 4;
    const int middles = n - (has_approach ? 3 : 2);

    std::set<std::string> states;
    auto add_states = [&](CommandKind k) {
        for (auto& s : induced_states(k)) states.insert(s);
    };
    add_states(CommandKind::Takeoff);
    add_states(CommandKind::Land);
    if (has_approach) add_states(CommandKind::Approach);
    if (static_cast<int>(states.size()) > c.state_budget)
        throw std::invalid_argument("unsatisfiable plan constraints: state budget below " +
                                    std::to_string(states.size()));

    FlightPlan plan;
    plan.commands.push_back({CommandKind::Takeoff});

    double nominal_alt = 150.0;  // ft, after the initial climb-out
    double nx = 0.0, ny = 0.0;   // m, nominal position
    CommandKind prev = CommandKind::Takeoff;
    for (int i = 0; i < middles; ++i) {
        std::vector<CommandKind> allowed;
        for (CommandKind k : {CommandKind::Climb, CommandKind::Cruise, CommandKind::GotoWaypoint,
                              CommandKind::Loiter, CommandKind::Descend}) {
            if (i == 0 && k != CommandKind::Climb) continue;  // always climb out first
            if (k == CommandKind::Descend && nominal_alt < 700.0) continue;
            if (k == prev) continue;
            auto with = states;
            for (auto& s : induced_states(k)) with.insert(s);
            if (static_cast<int>(with.size()) > c.state_budget) continue;
            allowed.push_back(k);
        }
        if (allowed.empty()) {
            // relax the no-repeat rule before giving up
            if (prev != CommandKind::Takeoff &&
                (prev != CommandKind::Descend || nominal_alt >= 700.0))
                allowed.push_back(prev);
            else
                throw std::invalid_argument(
                    "unsatisfiable plan constraints: state budget too small");
        }
        const CommandKind k = allowed[static_cast<std::size_t>(rng.uniform_int(
            static_cast<std::int64_t>(allowed.size())))];
        Command cmd{k};
        switch (k) {
            case CommandKind::Climb: {
                const double delta = rng.uniform(500.0, 1400.0);
                cmd.a = std::round((nominal_alt + delta) / 25.0) * 25.0;
                nominal_alt = cmd.a;
                break;
            }
            case CommandKind::Cruise:
                cmd.a = std::round(rng.uniform(25.0, 70.0));
                break;
            case CommandKind::GotoWaypoint: {
                const double bearing = rng.uniform(0.0, 2.0 * M_PI);
                const double dist = rng.uniform(3000.0, 7000.0);
                cmd.a = nx + dist * std::cos(bearing);
                cmd.b = ny + dist * std::sin(bearing);
                nx = cmd.a;
                ny = cmd.b;
                break;
            }
            case CommandKind::Loiter:
                cmd.a = std::round(rng.uniform(20.0, 50.0));
                cmd.b = rng.uniform_int(2) == 0 ? -1.0 : 1.0;  // circling direction
                break;
            case CommandKind::Descend: {
                const double delta = rng.uniform(300.0, 800.0);
                cmd.a = std::max(400.0, std::round((nominal_alt - delta) / 25.0) * 25.0);
                nominal_alt = cmd.a;
                break;
            }
            default: break;
        }
        add_states(k);
        plan.commands.push_back(cmd);
        prev = k;
    }
    if (has_approach) plan.commands.push_back({CommandKind::Approach});
    plan.commands.push_back({CommandKind::Land});
    plan.validate();
    return plan;
}

// ---------------------------------------------------------------------------
// Parameters

void AircraftParams::validate() const {
    if (actuator_lag < 1) throw std::invalid_argument("actuator lag must be >= 1 step");
    for (double s : sensor_noise)
        if (s < 0) throw std::invalid_argument("sensor noise stddevs must be >= 0");
    if (wind_reversion < 0 || wind_speed_vol < 0 || wind_roll_vol < 0 || wind_pitch_vol < 0)
        throw std::invalid_argument("wind model parameters must be >= 0");
    if (!(stall_speed < rotate_speed && rotate_speed <= cruise_speed))
        throw std::invalid_argument("speed ordering must be stall < rotate <= cruise");
}

AircraftParams AircraftParams::variant_a() { return AircraftParams{}; }

AircraftParams AircraftParams::variant_b() {
    AircraftParams p;
    // a heavier, slower airframe with laggier actuators and softer gains
    p.k_alt_to_pitch = 0.04;
    p.k_pitch_to_elevator = 0.04;
    p.k_heading_to_roll = 0.8;
    p.k_roll_to_aileron = 0.012;
    p.k_speed_to_throttle = 0.06;
    p.pitch_rate = 6.5;
    p.roll_rate = 22.0;
    p.thrust_accel = 3.6;
    p.drag_coeff = 1.9;
    p.reference_speed = 70.0;
    p.cruise_speed = 68.0;
    p.climb_speed = 58.0;
    p.approach_speed = 52.0;
    p.rotate_speed = 50.0;
    p.stall_speed = 40.0;
    p.max_pitch = 8.0;
    p.min_pitch = -7.0;
    p.max_bank = 25.0;
    p.loiter_bank = 20.0;
    p.actuator_lag = 5;
    p.actuator_tau = 0.8;
    return p;
}

// ---------------------------------------------------------------------------
// Catalog and schema

Granularity granularity_from_string(const std::string& name) {
    if (name == "coarse") return Granularity::Coarse;
    if (name == "fine") return Granularity::Fine;
    throw std::invalid_argument("unknown granularity: " + name);
}

std::string to_string(Granularity g) { return g == Granularity::Coarse ? "coarse" : "fine"; }

StateCatalog make_catalog(Granularity g) {
    if (g == Granularity::Coarse)
        return StateCatalog({"takeoff_roll", "initial_climb", "climb", "cruise", "turn", "track",
                             "loiter", "descend", "approach", "flare", "rollout"});
    return StateCatalog({"takeoff_roll", "initial_climb",
                         "climb_low", "climb_mid", "climb_high",
                         "cruise_low", "cruise_mid", "cruise_high",
                         "turn_left", "turn_right",
                         "track_low", "track_mid", "track_high",
                         "loiter_left", "loiter_right",
                         "descend_low", "descend_mid", "descend_high",
                         "approach", "flare", "rollout"});
}

std::vector<ChannelSpec> make_schema() {
    return {
        {"pitch", ChannelKind::Input, "deg"},     {"roll", ChannelKind::Input, "deg"},
        {"yaw", ChannelKind::Input, "deg"},       {"altitude", ChannelKind::Input, "ft"},
        {"airspeed", ChannelKind::Input, "kt"},   {"elevator", ChannelKind::Output, "pos"},
        {"aileron", ChannelKind::Output, "pos"},  {"rudder", ChannelKind::Output, "pos"},
        {"throttle", ChannelKind::Output, "frac"}, {"flaps", ChannelKind::Output, "frac"},
    };
}

// ---------------------------------------------------------------------------
// Simulation

namespace {

enum class Mode { TakeoffRoll, InitialClimb, Climb, Cruise, Turn, Track, Loiter, Descend,
                  Approach, Flare, Rollout };

struct ModeInstance {
    Mode mode;
    double a = 0.0, b = 0.0;  // same payload as the originating command
};

std::vector<ModeInstance> expand_plan(const FlightPlan& plan) {
    std::vector<ModeInstance> modes;
    for (const auto& c : plan.commands) {
        switch (c.kind) {
            case CommandKind::Takeoff:
                modes.push_back({Mode::TakeoffRoll});
                modes.push_back({Mode::InitialClimb});
                break;
            case CommandKind::Climb: modes.push_back({Mode::Climb, c.a}); break;
            case CommandKind::Cruise: modes.push_back({Mode::Cruise, c.a}); break;
            case CommandKind::GotoWaypoint:
                modes.push_back({Mode::Turn, c.a, c.b});
                modes.push_back({Mode::Track, c.a, c.b});
                break;
            case CommandKind::Loiter: modes.push_back({Mode::Loiter, c.a, c.b}); break;
            case CommandKind::Descend: modes.push_back({Mode::Descend, c.a}); break;
            case CommandKind::Approach: modes.push_back({Mode::Approach}); break;
            case CommandKind::Land:
                modes.push_back({Mode::Flare});
                modes.push_back({Mode::Rollout});
                break;
        }
    }
    return modes;
}

/// Pure transport delay (ring buffer) followed by a first-order response.
class Actuator {
public:
    Actuator(int lag, double alpha, double initial = 0.0)
        : buf_(static_cast<std::size_t>(lag), initial), alpha_(alpha), actual_(initial) {}

    double step(double cmd) {
        const double delayed = buf_[head_];
        buf_[head_] = cmd;
        head_ = (head_ + 1) % buf_.size();
        actual_ += alpha_ * (delayed - actual_);
        return actual_;
    }

private:
    std::vector<double> buf_;
    std::size_t head_ = 0;
    double alpha_;
    double actual_;
};

int altitude_band(double h) { return h < 1000.0 ? 0 : (h < 2000.0 ? 1 : 2); }

} // namespace

std::pair<MultivariateTrace, ChangePointAnnotation>
simulate_flight(const FlightPlan& plan, const AircraftParams& params, std::uint64_t seed,
                Granularity granularity) {
    plan.validate();
    params.validate();
    const StateCatalog catalog = make_catalog(granularity);
    const auto modes = expand_plan(plan);

    RngStream noise_rng = RngStream::substream(seed, "sensor-noise");
    RngStream wind_rng = RngStream::substream(seed, "wind");

    // physical state
    double x = 0, y = 0, h = 0, v = 0, pitch = 0, roll = 0, yaw = 0;
    bool on_ground = true;
    double gust_v = 0, gust_roll = 0, gust_pitch = 0;

    const double alpha = 1.0 - std::exp(-kDt / std::max(params.actuator_tau, 1e-3));
    Actuator act_elev(params.actuator_lag, alpha), act_ail(params.actuator_lag, alpha),
        act_rud(params.actuator_lag, alpha), act_thr(params.actuator_lag, alpha),
        act_flap(params.actuator_lag, alpha);

    // per-mode runtime
    std::size_t mode_idx = 0;
    bool entered = false;
    int steps_in_mode = 0;
    double h_ref = 0, yaw_ref = 0, prev_dist = 0;
    int away_count = 0, turn_dir = 1;
    double throttle_integral = 0;

    auto dist_to = [&](const ModeInstance& m) { return std::hypot(m.a - x, m.b - y); };
    auto bearing_to = [&](const ModeInstance& m) { return std::atan2(m.b - y, m.a - x) * kDeg; };

    auto mode_done = [&](const ModeInstance& m) {
        switch (m.mode) {
            case Mode::TakeoffRoll: return v >= params.rotate_speed;
            case Mode::InitialClimb: return h >= params.initial_climb_alt;
            case Mode::Climb: return h >= m.a - 5.0;
            case Mode::Cruise:
            case Mode::Loiter: return steps_in_mode >= static_cast<int>(std::lround(m.a / kDt));
            case Mode::Turn: return std::abs(wrap_deg(bearing_to(m) - yaw)) < 8.0;
            case Mode::Track: return dist_to(m) < 250.0 || away_count >= 25;
            case Mode::Descend: return h <= m.a + 5.0;
            case Mode::Approach: return h <= params.approach_alt + 20.0;
            case Mode::Flare: return on_ground;
            case Mode::Rollout: return v <= 2.0;
        }
        return false;
    };

    std::vector<Eigen::RowVectorXd> rows;
    std::vector<int> labels;
    const int max_steps = 60000;

    for (int t = 0;; ++t) {
        // advance through any modes whose exit condition already holds
        while (true) {
            if (mode_idx >= modes.size()) break;
            if (!entered) {
                entered = true;
                steps_in_mode = 0;
                h_ref = h;
                yaw_ref = yaw;
                away_count = 0;
                throttle_integral = 0;
                const auto& m = modes[mode_idx];
                if (m.mode == Mode::Turn)
                    turn_dir = wrap_deg(bearing_to(m) - yaw) < 0 ? -1 : 1;
                if (m.mode == Mode::Loiter) turn_dir = m.b < 0 ? -1 : 1;
                if (m.mode == Mode::InitialClimb) on_ground = false;
                if (m.mode == Mode::Track || m.mode == Mode::Turn) prev_dist = dist_to(m);
            }
            if (mode_done(modes[mode_idx])) {
                ++mode_idx;
                entered = false;
                continue;
            }
            break;
        }
        if (mode_idx >= modes.size()) break;
        if (t >= max_steps)
            throw std::runtime_error("simulation did not terminate within " +
                                     std::to_string(max_steps) + " steps");
        const ModeInstance& m = modes[mode_idx];

        // ground-truth label
        std::string state_name;
        switch (m.mode) {
            case Mode::TakeoffRoll: state_name = "takeoff_roll"; break;
            case Mode::InitialClimb: state_name = "initial_climb"; break;
            case Mode::Climb: state_name = "climb"; break;
            case Mode::Cruise: state_name = "cruise"; break;
            case Mode::Turn: state_name = "turn"; break;
            case Mode::Track: state_name = "track"; break;
            case Mode::Loiter: state_name = "loiter"; break;
            case Mode::Descend: state_name = "descend"; break;
            case Mode::Approach: state_name = "approach"; break;
            case Mode::Flare: state_name = "flare"; break;
            case Mode::Rollout: state_name = "rollout"; break;
        }
        if (granularity == Granularity::Fine) {
            static const std::set<std::string> banded{"climb", "cruise", "track", "descend"};
            if (banded.count(state_name)) {
                static const char* suffix[] = {"_low", "_mid", "_high"};
                state_name += suffix[altitude_band(h)];
            } else if (state_name == "turn" || state_name == "loiter") {
                state_name += turn_dir < 0 ? "_left" : "_right";
            }
        }
        labels.push_back(catalog.id_of(state_name));

        // sensor readings (controller inputs; logged as-is)
        const double s_pitch = pitch + noise_rng.normal(0, params.sensor_noise[0]);
        const double s_roll = roll + noise_rng.normal(0, params.sensor_noise[1]);
        const double s_yaw = yaw + noise_rng.normal(0, params.sensor_noise[2]);
        const double s_alt = h + noise_rng.normal(0, params.sensor_noise[3]);
        const double s_spd = v + noise_rng.normal(0, params.sensor_noise[4]);

        // --- cascaded control laws ---
        double pitch_cmd = 0, roll_cmd = 0, v_target = params.cruise_speed, flap_cmd = 0;
        bool force_full_throttle = false, force_idle = false;
        switch (m.mode) {
            case Mode::TakeoffRoll:
                force_full_throttle = true;
                flap_cmd = 0.3;
                break;
            case Mode::InitialClimb:
                pitch_cmd = 8.0;
                v_target = params.climb_speed;
                flap_cmd = 0.3;
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(yaw_ref - s_yaw), -8.0, 8.0);
                break;
            case Mode::Climb:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (m.a - s_alt), 0.5, params.max_pitch);
                v_target = params.climb_speed;
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(yaw_ref - s_yaw), -8.0, 8.0);
                break;
            case Mode::Cruise:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (h_ref - s_alt), -3.0, 3.0);
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(yaw_ref - s_yaw), -8.0, 8.0);
                break;
            case Mode::Turn:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (h_ref - s_alt), -3.0, 3.0);
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(bearing_to(m) - s_yaw),
                                      -params.max_bank, params.max_bank);
                break;
            case Mode::Track:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (h_ref - s_alt), -3.0, 3.0);
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(bearing_to(m) - s_yaw),
                                      -12.0, 12.0);
                break;
            case Mode::Loiter:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (h_ref - s_alt), -3.0, 3.0);
                roll_cmd = turn_dir * params.loiter_bank;
                break;
            case Mode::Descend:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (m.a - s_alt), params.min_pitch, -0.5);
                v_target = params.cruise_speed * 0.9;
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(yaw_ref - s_yaw), -8.0, 8.0);
                break;
            case Mode::Approach:
                pitch_cmd = std::clamp(params.k_alt_to_pitch * (params.approach_alt - s_alt),
                                       params.min_pitch, -0.5);
                v_target = params.approach_speed;
                flap_cmd = 0.5;
                roll_cmd = std::clamp(params.k_heading_to_roll * wrap_deg(yaw_ref - s_yaw), -8.0, 8.0);
                break;
            case Mode::Flare:
                pitch_cmd = -1.5;
                force_idle = true;
                flap_cmd = 1.0;
                break;
            case Mode::Rollout:
                force_idle = true;
                flap_cmd = 1.0;
                break;
        }

        double elev_cmd = 0, ail_cmd = 0, rud_cmd = 0, thr_cmd = 0;
        if (!on_ground) {
            elev_cmd = std::clamp(params.k_pitch_to_elevator * (pitch_cmd - s_pitch), -1.0, 1.0);
            ail_cmd = std::clamp(params.k_roll_to_aileron * (roll_cmd - s_roll), -1.0, 1.0);
            rud_cmd = std::clamp(params.k_rudder * roll_cmd / params.max_bank, -1.0, 1.0);
        }
        if (force_full_throttle) {
            thr_cmd = 1.0;
        } else if (force_idle) {
            thr_cmd = 0.0;
        } else {
            static const double kFeedForward[] = {0.0, 0.75, 0.75, 0.5, 0.5, 0.5,
                                                  0.55, 0.25, 0.4, 0.0, 0.0};
            const double err = v_target - s_spd;
            throttle_integral = std::clamp(throttle_integral + err * kDt, -40.0, 40.0);
            thr_cmd = std::clamp(kFeedForward[static_cast<int>(m.mode)] +
                                     params.k_speed_to_throttle * err +
                                     params.k_throttle_integral * throttle_integral,
                                 0.0, 1.0);
        }

        // actuators: transport delay + first-order response
        const double elev = act_elev.step(elev_cmd);
        const double ail = act_ail.step(ail_cmd);
        const double rud = act_rud.step(rud_cmd);
        const double thr = act_thr.step(thr_cmd);
        const double flap = act_flap.step(flap_cmd);

        // log one row: 5 sensed inputs, 5 actuator outputs (with pickoff noise)
        Eigen::RowVectorXd row(10);
        row << s_pitch, s_roll, s_yaw, s_alt, s_spd,
            elev + noise_rng.normal(0, params.sensor_noise[5]),
            ail + noise_rng.normal(0, params.sensor_noise[6]),
            rud + noise_rng.normal(0, params.sensor_noise[7]),
            thr + noise_rng.normal(0, params.sensor_noise[8]),
            flap + noise_rng.normal(0, params.sensor_noise[9]);
        rows.push_back(row);

        // --- point-mass dynamics ---
        const double v_ms = v * kKtToMs;
        if (!on_ground) {
            pitch += kDt * (params.pitch_rate * elev + gust_pitch);
            roll += kDt * (params.roll_rate * ail + gust_roll);
            pitch = std::clamp(pitch, -25.0, 25.0);
            roll = std::clamp(roll, -50.0, 50.0);
            // coordinated turn; the rudder only coordinates, it does not steer
            const double turn_rate = kDeg * kG * std::tan(roll / kDeg) / std::max(v_ms, 10.0);
            yaw = wrap_deg(yaw + kDt * turn_rate);
        } else {
            pitch = 0;
            roll = 0;
        }

        double accel = params.thrust_accel * thr -
                       params.drag_coeff * (v / params.reference_speed) * (v / params.reference_speed) -
                       params.flap_drag * flap * (v / params.reference_speed) * (v / params.reference_speed) +
                       gust_v;
        if (!on_ground)
            accel -= params.pitch_drag * std::sin(pitch / kDeg) * (v / params.reference_speed);
        else
            accel -= params.ground_friction + (m.mode == Mode::Rollout ? params.brake_decel : 0.0);
        v = std::max(0.0, v + kDt * accel);

        if (!on_ground) {
            const double stall_frac = v / params.stall_speed;
            const double sink = params.sink_gain * std::max(0.0, 1.0 - stall_frac * stall_frac);
            h += kDt * (v * kKtToMs * std::sin(pitch / kDeg) * kMsToFtps - sink);
            if (h <= 0.0 && m.mode == Mode::Flare) {
                h = 0.0;
                on_ground = true;
            }
            h = std::max(h, 0.0);
        }
        x += kDt * v_ms * std::cos(yaw / kDeg);
        y += kDt * v_ms * std::sin(yaw / kDeg);

        // mean-reverting gusts
        const double sq = std::sqrt(kDt);
        gust_v += kDt * (-params.wind_reversion * gust_v) +
                  params.wind_speed_vol * sq * wind_rng.normal();
        gust_roll += kDt * (-params.wind_reversion * gust_roll) +
                     params.wind_roll_vol * sq * wind_rng.normal();
        gust_pitch += kDt * (-params.wind_reversion * gust_pitch) +
                      params.wind_pitch_vol * sq * wind_rng.normal();

        if (m.mode == Mode::Track) {
            const double d = dist_to(m);
            away_count = d > prev_dist + 1.0 ? away_count + 1 : 0;
            prev_dist = d;
        }
        ++steps_in_mode;

        if (!(std::isfinite(x) && std::isfinite(y) && std::isfinite(h) && std::isfinite(v) &&
              std::isfinite(pitch) && std::isfinite(roll) && std::isfinite(yaw)))
            throw std::runtime_error("simulation diverged at step " + std::to_string(t));
    }

    MultivariateTrace trace;
    trace.schema = make_schema();
    trace.sample_period = kDt;
    trace.samples.resize(static_cast<Eigen::Index>(rows.size()), 10);
    for (std::size_t i = 0; i < rows.size(); ++i) trace.samples.row(static_cast<Eigen::Index>(i)) = rows[i];

    LabelSequence seq;
    seq.labels = std::move(labels);
    seq.mask.assign(seq.labels.size(), 1);
    return {std::move(trace), extract_change_points(seq)};
}

// ---------------------------------------------------------------------------
// Dataset generation

SimConfig SimConfig::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    SimConfig c;
    for (const auto& [key, val] : j.items()) {
        if (key == "count") c.count = val.get<int>();
        else if (key == "seed") c.seed = val.get<std::uint64_t>();
        else if (key == "min_length") c.min_length = val.get<int>();
        else if (key == "max_length") c.max_length = val.get<int>();
        else if (key == "variant") c.variant = val.get<std::string>();
        else if (key == "granularity") c.granularity = granularity_from_string(val.get<std::string>());
        else if (key == "param_jitter") c.param_jitter = val.get<double>();
        else if (key == "noise_scale") c.noise_scale = val.get<double>();
        else if (key == "wind_scale") c.wind_scale = val.get<double>();
        else if (key == "lag_min") c.lag_min = val.get<int>();
        else if (key == "lag_max") c.lag_max = val.get<int>();
        else if (key == "plan") {
            for (const auto& [pk, pv] : val.items()) {
                if (pk == "min_commands") c.plan.min_commands = pv.get<int>();
                else if (pk == "max_commands") c.plan.max_commands = pv.get<int>();
                else if (pk == "state_budget") c.plan.state_budget = pv.get<int>();
                else throw std::invalid_argument("unknown field in generation config: plan." + pk);
            }
        } else {
            throw std::invalid_argument("unknown field in generation config: " + key);
        }
    }
    if (c.count < 1) throw std::invalid_argument("generation config: count must be >= 1");
    if (c.lag_min < 1 || c.lag_max < c.lag_min)
        throw std::invalid_argument("generation config: need 1 <= lag_min <= lag_max");
    return c;
}

SimConfig SimConfig::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open generation config: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

AircraftParams params_for_variant(const std::string& variant) {
    if (variant == "variant_a") return AircraftParams::variant_a();
    if (variant == "variant_b") return AircraftParams::variant_b();
    throw std::invalid_argument("unknown aircraft variant: " + variant);
}

AircraftParams sample_params(const SimConfig& config, std::uint64_t flight_seed) {
    RngStream rng = RngStream::substream(flight_seed, "params");
    AircraftParams p = params_for_variant(config.variant);
    const double j = config.param_jitter;
    auto jitter = [&](double& v, double scale) { v *= 1.0 + scale * j * rng.uniform(-1.0, 1.0); };
    jitter(p.k_alt_to_pitch, 1.0);
    jitter(p.k_pitch_to_elevator, 1.0);
    jitter(p.k_heading_to_roll, 1.0);
    jitter(p.k_roll_to_aileron, 1.0);
    jitter(p.k_speed_to_throttle, 1.0);
    jitter(p.pitch_rate, 1.0);
    jitter(p.roll_rate, 1.0);
    jitter(p.thrust_accel, 1.0);
    jitter(p.drag_coeff, 1.0);
    // half-strength on speeds so the stall < rotate <= cruise ordering holds
    jitter(p.cruise_speed, 0.5);
    jitter(p.climb_speed, 0.5);
    jitter(p.approach_speed, 0.5);
    p.actuator_lag = config.lag_min +
                     static_cast<int>(rng.uniform_int(config.lag_max - config.lag_min + 1));
    jitter(p.actuator_tau, 1.0);
    for (double& s : p.sensor_noise) s *= config.noise_scale;
    p.wind_speed_vol *= config.wind_scale;
    p.wind_roll_vol *= config.wind_scale;
    p.wind_pitch_vol *= config.wind_scale;
    p.validate();
    return p;
}

Dataset generate_dataset(const SimConfig& config, const std::filesystem::path& out_dir) {
    if (config.count < 1) throw std::invalid_argument("generation config: count must be >= 1");
    Dataset ds;
    ds.schema = make_schema();
    ds.catalog = make_catalog(config.granularity);
    ds.sample_period = kDt;

    for (int i = 0; i < config.count; ++i) {
        bool ok = false;
        for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
            const std::uint64_t fseed =
                RngStream::derive_seed(config.seed, "simgen", static_cast<std::uint64_t>(i) * 16 + attempt);
            const FlightPlan plan =
                generate_flight_plan(RngStream::derive_seed(fseed, "flight-plan"), config.plan);
            const AircraftParams params = sample_params(config, fseed);
            auto [trace, ann] = simulate_flight(plan, params,
                                                RngStream::derive_seed(fseed, "flight-sim"),
                                                config.granularity);
            if (trace.length() < config.min_length || trace.length() > config.max_length) continue;
            char id[32];
            std::snprintf(id, sizeof id, "flight_%04d", i);
            ds.items.push_back({id, std::move(trace), std::move(ann)});
            ok = true;
        }
        if (!ok)
            throw std::runtime_error("could not generate flight " + std::to_string(i) +
                                     " within length bounds after 10 attempts");
    }
    save_dataset(ds, out_dir, "manifest.json", {config.min_length, config.max_length});
    return ds;
}

} // namespace statetrace::sim
