#pragma once

#include "statetrace/trace.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace statetrace::sim {

// ---------------------------------------------------------------------------
// Flight plans

enum class CommandKind { Takeoff, Climb, Cruise, GotoWaypoint, Loiter, Descend, Approach, Land };

std::string to_string(CommandKind kind);

struct Command {
    CommandKind kind;
    double a = 0.0;  // climb/descend: target altitude ft; cruise/loiter: duration s; goto: x m
    double b = 0.0;  // goto: y m
};

struct FlightPlan {
    std::vector<Command> commands;

    /// Throws unless the plan starts with takeoff, ends with land, altitude
    /// targets are positive and waypoint coordinates are finite.
    void validate() const;
};

struct PlanConstraints {
    int min_commands = 4;
    int max_commands = 7;
    /// Upper bound on distinct ground-truth states the plan may induce.
    int state_budget = 12;
};

FlightPlan generate_flight_plan(std::uint64_t seed, const PlanConstraints& constraints = {});

// ---------------------------------------------------------------------------
// Aircraft + autopilot parameters

struct AircraftParams {
    // cascaded loop gains
    double k_alt_to_pitch = 0.05;       // deg pitch command per ft altitude error
    double k_pitch_to_elevator = 0.05;  // elevator per deg pitch error
    double k_heading_to_roll = 1.0;     // deg roll command per deg heading error
    double k_roll_to_aileron = 0.015;   // aileron per deg roll error
    double k_speed_to_throttle = 0.08;  // throttle per kt speed error
    double k_throttle_integral = 0.010; // per kt-second
    double k_rudder = 0.45;             // rudder per unit of bank fraction

    // airframe response
    double pitch_rate = 9.0;    // deg/s at full elevator deflection
    double roll_rate = 30.0;    // deg/s at full aileron deflection
    double thrust_accel = 4.4;  // kt/s at full throttle
    double drag_coeff = 2.2;    // kt/s at reference speed
    double pitch_drag = 6.0;    // kt/s per unit sin(pitch) at reference speed
    double flap_drag = 1.2;     // extra drag at full flaps
    double ground_friction = 0.3;  // kt/s rolling resistance
    double brake_decel = 2.5;      // kt/s during rollout
    double sink_gain = 25.0;       // ft/s of sink when fully below stall speed
    double reference_speed = 80.0; // kt

    // speeds (kt) and mode targets
    double cruise_speed = 80.0;
    double climb_speed = 65.0;
    double approach_speed = 58.0;
    double rotate_speed = 55.0;
    double stall_speed = 45.0;
    double initial_climb_alt = 150.0;  // ft
    double approach_alt = 60.0;        // ft, glideslope capture floor
    double max_pitch = 10.0, min_pitch = -8.0;  // deg
    double max_bank = 30.0;                     // deg
    double loiter_bank = 25.0;                  // deg

    // actuators
    int actuator_lag = 3;        // whole control steps of pure delay, >= 1
    double actuator_tau = 0.5;   // s, first-order response after the delay

    // disturbances
    double wind_reversion = 0.4;   // 1/s mean-reversion rate of the gust process
    double wind_speed_vol = 0.6;   // kt/sqrt(s) gust accel on airspeed
    double wind_roll_vol = 1.2;    // deg/s/sqrt(s) gust on roll rate
    double wind_pitch_vol = 0.4;   // deg/s/sqrt(s) gust on pitch rate
    // sensor noise stddev per channel: pitch, roll, yaw, altitude, airspeed,
    // elevator, aileron, rudder, throttle, flaps
    std::array<double, 10> sensor_noise{0.15, 0.15, 0.2, 2.0, 0.5,
                                        0.005, 0.005, 0.005, 0.004, 0.004};

    void validate() const;

    static AircraftParams variant_a();
    static AircraftParams variant_b();
};

// ---------------------------------------------------------------------------
// Simulation

/// Catalog granularity. Coarse = 11 controller modes. Fine additionally bands
/// climb/cruise/descend/track by altitude and splits turns/loiters by
/// direction (21 states), approaching the 25-state ceiling.
enum class Granularity { Coarse, Fine };

Granularity granularity_from_string(const std::string& name);
std::string to_string(Granularity g);

StateCatalog make_catalog(Granularity g = Granularity::Coarse);
std::vector<ChannelSpec> make_schema();

std::pair<MultivariateTrace, ChangePointAnnotation>
simulate_flight(const FlightPlan& plan, const AircraftParams& params, std::uint64_t seed,
                Granularity granularity = Granularity::Coarse);

// ---------------------------------------------------------------------------
// Dataset generation

struct SimConfig {
    int count = 120;
    std::uint64_t seed = 1;
    int min_length = 800;
    int max_length = 2500;
    std::string variant = "variant_a";
    Granularity granularity = Granularity::Coarse;
    PlanConstraints plan;
    // per-flight parameter randomization
    double param_jitter = 0.10;  // relative jitter on gains/speeds
    double noise_scale = 1.0;
    double wind_scale = 1.0;
    int lag_min = 2;
    int lag_max = 4;

    static SimConfig from_json_file(const std::filesystem::path& path);
    static SimConfig from_json_text(const std::string& text);
};

AircraftParams params_for_variant(const std::string& variant);

/// Draw per-flight parameters: the variant preset jittered inside the
/// configured ranges. Deterministic in (config, flight index).
AircraftParams sample_params(const SimConfig& config, std::uint64_t flight_seed);

/// Generate `config.count` flights, write them as CSVs plus a manifest under
/// `out_dir`, and return the loaded-back dataset. Flights whose lengths fall
/// outside the configured bounds are retried with a derived seed.
Dataset generate_dataset(const SimConfig& config, const std::filesystem::path& out_dir);

} // namespace statetrace::sim
