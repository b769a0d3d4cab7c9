#include "statetrace/nn.hpp"

#include "statetrace/common.hpp"
#include "statetrace/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace statetrace::nn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Variant names and config
// ---------------------------------------------------------------------------

std::string to_string(ModelVariant variant) {
    switch (variant) {
        case ModelVariant::Hybrid: return "hybrid";
        case ModelVariant::CnnOnly: return "cnn_only";
        case ModelVariant::RnnOnly: return "rnn_only";
        case ModelVariant::CnnFull: return "cnn_full";
        case ModelVariant::RnnFull: return "rnn_full";
    }
    throw std::invalid_argument("unknown model variant");
}

ModelVariant variant_from_string(const std::string& name) {
    if (name == "hybrid") return ModelVariant::Hybrid;
    if (name == "cnn_only") return ModelVariant::CnnOnly;
    if (name == "rnn_only") return ModelVariant::RnnOnly;
    if (name == "cnn_full") return ModelVariant::CnnFull;
    if (name == "rnn_full") return ModelVariant::RnnFull;
    throw std::invalid_argument("unknown model variant: '" + name + "'");
}

void ModelConfig::validate() const {
    if (n_channels < 1) throw std::invalid_argument("model config: n_channels must be >= 1");
    if (n_classes < 1) throw std::invalid_argument("model config: n_classes must be >= 1");
    if (dense_hidden < 1) throw std::invalid_argument("model config: dense_hidden must be >= 1");
    if (!(leaky_alpha >= 0.0 && leaky_alpha < 1.0))
        throw std::invalid_argument("model config: leaky_alpha must be in [0, 1)");
    if (!(learning_rate > 0.0))
        throw std::invalid_argument("model config: learning_rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("model config: batch_size must be >= 1");
    if (max_epochs < 0) throw std::invalid_argument("model config: max_epochs must be >= 0");
    if (patience < 1) throw std::invalid_argument("model config: patience must be >= 1");
    int prev_kernel = 0;
    for (const ConvSpec& spec : conv_stack) {
        if (spec.filters < 1 || spec.kernel < 1)
            throw std::invalid_argument("model config: conv filters and kernels must be >= 1");
        if (spec.kernel < prev_kernel)
            throw std::invalid_argument(
                "model config: kernel sizes must be non-decreasing across the stack");
        prev_kernel = spec.kernel;
    }
    for (int cells : gru_stack)
        if (cells < 1) throw std::invalid_argument("model config: gru cell counts must be >= 1");

    const bool needs_conv = variant == ModelVariant::Hybrid || variant == ModelVariant::CnnOnly ||
                            variant == ModelVariant::CnnFull;
    const bool needs_gru = variant == ModelVariant::Hybrid || variant == ModelVariant::RnnOnly;
    if (needs_conv && conv_stack.empty())
        throw std::invalid_argument("model config: this variant requires a non-empty conv stack");
    if (needs_gru && gru_stack.empty())
        throw std::invalid_argument("model config: this variant requires a non-empty gru stack");
}

namespace {

json config_to_json(const ModelConfig& c) {
    json j;
    json conv = json::array();
    for (const ConvSpec& s : c.conv_stack) conv.push_back({s.filters, s.kernel});
    j["conv_stack"] = conv;
    j["gru_stack"] = c.gru_stack;
    j["dense_hidden"] = c.dense_hidden;
    j["leaky_alpha"] = c.leaky_alpha;
    j["n_channels"] = c.n_channels;
    j["n_classes"] = c.n_classes;
    j["learning_rate"] = c.learning_rate;
    j["batch_size"] = c.batch_size;
    j["max_epochs"] = c.max_epochs;
    j["patience"] = c.patience;
    j["seed"] = c.seed;
    j["variant"] = to_string(c.variant);
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "conv_stack") {
            c.conv_stack.clear();
            for (const auto& pair : value)
                c.conv_stack.push_back({pair.at(0).get<int>(), pair.at(1).get<int>()});
        } else if (key == "gru_stack") {
            c.gru_stack = value.get<std::vector<int>>();
        } else if (key == "dense_hidden") {
            c.dense_hidden = value.get<int>();
        } else if (key == "leaky_alpha") {
            c.leaky_alpha = value.get<double>();
        } else if (key == "n_channels") {
            c.n_channels = value.get<int>();
        } else if (key == "n_classes") {
            c.n_classes = value.get<int>();
        } else if (key == "learning_rate") {
            c.learning_rate = value.get<double>();
        } else if (key == "batch_size") {
            c.batch_size = value.get<int>();
        } else if (key == "max_epochs") {
            c.max_epochs = value.get<int>();
        } else if (key == "patience") {
            c.patience = value.get<int>();
        } else if (key == "seed") {
            c.seed = value.get<std::uint64_t>();
        } else if (key == "variant") {
            c.variant = variant_from_string(value.get<std::string>());
        } else {
            throw std::invalid_argument("unknown field in model config: " + key);
        }
    }
    c.validate();
    return c;
}

} // namespace

std::string ModelConfig::to_json_text() const { return config_to_json(*this).dump(); }

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    return config_from_json(json::parse(text));
}

// ---------------------------------------------------------------------------
// Stacks and parameter counting
// ---------------------------------------------------------------------------

namespace {

long count_for_stacks(const ResolvedStacks& st, const ModelConfig& c) {
    long total = 0;
    int feat = c.n_channels;
    for (const ConvSpec& spec : st.conv) {
        total += static_cast<long>(spec.kernel) * feat * spec.filters + spec.filters;
        feat = spec.filters;
    }
    for (int cells : st.gru) {
        total += 3L * (static_cast<long>(feat) * cells + static_cast<long>(cells) * cells + cells);
        feat = cells;
    }
    total += static_cast<long>(feat) * c.dense_hidden + c.dense_hidden;
    total += static_cast<long>(c.dense_hidden) * c.n_classes + c.n_classes;
    return total;
}

std::vector<ConvSpec> matched_conv_stack(const ModelConfig& c) {
    ModelConfig reference = c;
    reference.variant = ModelVariant::Hybrid;
    const long target = parameter_count(reference);

    long best_diff = std::numeric_limits<long>::max();
    int best_filters = 0;
    for (int f = 1; f <= 4096; ++f) {
        ResolvedStacks st;
        for (const ConvSpec& spec : c.conv_stack) st.conv.push_back({f, spec.kernel});
        const long count = count_for_stacks(st, c);
        const long diff = count > target ? count - target : target - count;
        if (diff < best_diff) {
            best_diff = diff;
            best_filters = f;
        }
        if (count > target && diff > best_diff) break; // counts grow monotonically in f
    }
    if (best_filters == 0 || best_diff * 10 > target)
        throw std::runtime_error(
            "cnn_full: no filter width matches the reference parameter count within 10%");
    std::vector<ConvSpec> out;
    for (const ConvSpec& spec : c.conv_stack) out.push_back({best_filters, spec.kernel});
    return out;
}

} // namespace

ResolvedStacks resolve_stacks(const ModelConfig& config) {
    config.validate();
    switch (config.variant) {
        case ModelVariant::Hybrid: return {config.conv_stack, config.gru_stack};
        case ModelVariant::CnnOnly: return {config.conv_stack, {}};
        case ModelVariant::RnnOnly: return {{}, config.gru_stack};
        case ModelVariant::RnnFull: return {{}, {200, 200}};
        case ModelVariant::CnnFull: return {matched_conv_stack(config), {}};
    }
    throw std::invalid_argument("unknown model variant");
}

long parameter_count(const ModelConfig& config) {
    return count_for_stacks(resolve_stacks(config), config);
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

Batch make_batch(const std::vector<const Dataset::Item*>& items, const NormStats& stats,
                 int n_classes) {
    if (items.empty()) throw std::invalid_argument("make_batch: empty item list");
    Batch batch;
    batch.batch = static_cast<int>(items.size());
    batch.features = items.front()->trace.channels();
    for (const Dataset::Item* item : items) {
        if (item->trace.channels() != batch.features)
            throw std::invalid_argument("make_batch: inconsistent channel counts");
        batch.length = std::max(batch.length, item->trace.length());
    }
    if (stats.channels() != batch.features)
        throw std::invalid_argument("make_batch: normalization stats do not match the channels");

    batch.x.setZero(static_cast<long>(batch.length) * batch.batch, batch.features);
    batch.labels.assign(static_cast<std::size_t>(batch.length) * batch.batch, -1);
    batch.valid.resize(items.size());

    for (int b = 0; b < batch.batch; ++b) {
        const Dataset::Item& item = *items[b];
        const int len = item.trace.length();
        batch.valid[b] = len;
        const LabelSequence seq = expand_annotation(item.annotation, len);
        for (int t = 0; t < len; ++t) {
            const int row = t * batch.batch + b;
            for (int c = 0; c < batch.features; ++c) {
                const double sd = stats.stddev[c] < 1e-12 ? 1.0 : stats.stddev[c];
                batch.x(row, c) =
                    static_cast<float>((item.trace.samples(t, c) - stats.mean[c]) / sd);
            }
            if (seq.labels[t] < 0 || seq.labels[t] >= n_classes)
                throw std::invalid_argument("make_batch: label outside the class range");
            batch.labels[static_cast<std::size_t>(row)] = seq.labels[t];
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Conv1d
// ---------------------------------------------------------------------------

template <class S>
Conv1dT<S>::Conv1dT(std::string name, int in, int out, int kernel)
    : LayerT<S>(std::move(name)), in_(in), out_(out), kernel_(kernel) {
    W.name = this->name() + ".W";
    W.value.setZero(static_cast<long>(kernel_) * in_, out_);
    b.name = this->name() + ".b";
    b.value.setZero(1, out_);
}

template <class S>
MatX<S> Conv1dT<S>::forward(const MatX<S>& x, int batch) {
    if (x.cols() != in_) throw std::invalid_argument(this->name() + ": input feature mismatch");
    if (batch < 1 || x.rows() % batch != 0)
        throw std::invalid_argument(this->name() + ": rows not divisible by batch");
    const int rows = static_cast<int>(x.rows());
    const int length = rows / batch;
    const int pad_left = (kernel_ - 1) / 2;

    cols_.setZero(rows, static_cast<long>(kernel_) * in_);
    for (int b2 = 0; b2 < batch; ++b2) {
        for (int t = 0; t < length; ++t) {
            const int row = t * batch + b2;
            for (int j = 0; j < kernel_; ++j) {
                const int src = t - pad_left + j;
                if (src < 0 || src >= length) continue;
                cols_.block(row, static_cast<long>(j) * in_, 1, in_) = x.row(src * batch + b2);
            }
        }
    }
    MatX<S> y = cols_ * W.value;
    y.rowwise() += b.value.row(0);
    return y;
}

template <class S>
MatX<S> Conv1dT<S>::backward(const MatX<S>& dy, int batch) {
    if (dy.cols() != out_ || dy.rows() != cols_.rows())
        throw std::invalid_argument(this->name() + ": gradient shape mismatch");
    const int rows = static_cast<int>(dy.rows());
    const int length = rows / batch;
    const int pad_left = (kernel_ - 1) / 2;

    W.grad.noalias() += cols_.transpose() * dy;
    b.grad.row(0) += dy.colwise().sum();

    const MatX<S> dcols = dy * W.value.transpose();
    MatX<S> dx = MatX<S>::Zero(rows, in_);
    for (int b2 = 0; b2 < batch; ++b2) {
        for (int t = 0; t < length; ++t) {
            const int row = t * batch + b2;
            for (int j = 0; j < kernel_; ++j) {
                const int src = t - pad_left + j;
                if (src < 0 || src >= length) continue;
                dx.row(src * batch + b2) += dcols.block(row, static_cast<long>(j) * in_, 1, in_);
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

template <class S>
GruT<S>::GruT(std::string name, int in, int hidden)
    : LayerT<S>(std::move(name)), in_(in), hidden_(hidden) {
    const auto init = [&](ParamT<S>& p, const std::string& suffix, int rows, int cols) {
        p.name = this->name() + "." + suffix;
        p.value.setZero(rows, cols);
    };
    init(Wz, "Wz", in_, hidden_);
    init(Wr, "Wr", in_, hidden_);
    init(Wh, "Wh", in_, hidden_);
    init(Uz, "Uz", hidden_, hidden_);
    init(Ur, "Ur", hidden_, hidden_);
    init(Uh, "Uh", hidden_, hidden_);
    init(bz, "bz", 1, hidden_);
    init(br, "br", 1, hidden_);
    init(bh, "bh", 1, hidden_);
}

namespace {

template <class M>
auto sigmoid_of(const M& m) {
    using Sc = typename M::Scalar;
    return (Sc(1) / (Sc(1) + (-m.array()).exp())).matrix();
}

} // namespace

template <class S>
MatX<S> GruT<S>::forward(const MatX<S>& x, int batch) {
    if (x.cols() != in_) throw std::invalid_argument(this->name() + ": input feature mismatch");
    if (batch < 1 || x.rows() % batch != 0)
        throw std::invalid_argument(this->name() + ": rows not divisible by batch");
    const int rows = static_cast<int>(x.rows());
    const int length = rows / batch;

    x_ = x;
    z_.resize(rows, hidden_);
    r_.resize(rows, hidden_);
    hc_.resize(rows, hidden_);
    h_.resize(rows, hidden_);

    MatX<S> hprev = MatX<S>::Zero(batch, hidden_);
    for (int t = 0; t < length; ++t) {
        const auto xt = x.middleRows(static_cast<long>(t) * batch, batch);
        MatX<S> az = xt * Wz.value + hprev * Uz.value;
        az.rowwise() += bz.value.row(0);
        MatX<S> ar = xt * Wr.value + hprev * Ur.value;
        ar.rowwise() += br.value.row(0);
        const MatX<S> zt = sigmoid_of(az);
        const MatX<S> rt = sigmoid_of(ar);
        MatX<S> ah = xt * Wh.value + rt.cwiseProduct(hprev) * Uh.value;
        ah.rowwise() += bh.value.row(0);
        const MatX<S> hct = ah.array().tanh().matrix();
        const MatX<S> ht =
            ((S(1) - zt.array()) * hprev.array() + zt.array() * hct.array()).matrix();

        z_.middleRows(static_cast<long>(t) * batch, batch) = zt;
        r_.middleRows(static_cast<long>(t) * batch, batch) = rt;
        hc_.middleRows(static_cast<long>(t) * batch, batch) = hct;
        h_.middleRows(static_cast<long>(t) * batch, batch) = ht;
        hprev = ht;
    }
    return h_;
}

template <class S>
MatX<S> GruT<S>::backward(const MatX<S>& dy, int batch) {
    if (dy.rows() != h_.rows() || dy.cols() != hidden_)
        throw std::invalid_argument(this->name() + ": gradient shape mismatch");
    const int rows = static_cast<int>(dy.rows());
    const int length = rows / batch;

    MatX<S> dx(rows, in_);
    MatX<S> dhnext = MatX<S>::Zero(batch, hidden_);

    for (int t = length - 1; t >= 0; --t) {
        const long base = static_cast<long>(t) * batch;
        const auto xt = x_.middleRows(base, batch);
        const auto zt = z_.middleRows(base, batch);
        const auto rt = r_.middleRows(base, batch);
        const auto hct = hc_.middleRows(base, batch);
        const MatX<S> hprev = t > 0 ? MatX<S>(h_.middleRows(base - batch, batch))
                                    : MatX<S>(MatX<S>::Zero(batch, hidden_));

        const MatX<S> dh = dy.middleRows(base, batch) + dhnext;

        // Pre-activation gradients for the three gates.
        const MatX<S> da_z = (dh.array() * (hct.array() - hprev.array()) * zt.array() *
                              (S(1) - zt.array()))
                                 .matrix();
        const MatX<S> da_h =
            (dh.array() * zt.array() * (S(1) - hct.array() * hct.array())).matrix();

        MatX<S> dhprev = (dh.array() * (S(1) - zt.array())).matrix();

        // Candidate path.
        Wh.grad.noalias() += xt.transpose() * da_h;
        Uh.grad.noalias() += rt.cwiseProduct(hprev).transpose() * da_h;
        bh.grad.row(0) += da_h.colwise().sum();
        const MatX<S> drh = da_h * Uh.value.transpose();
        const MatX<S> da_r =
            (drh.array() * hprev.array() * rt.array() * (S(1) - rt.array())).matrix();
        dhprev.array() += drh.array() * rt.array();

        // Reset gate path.
        Wr.grad.noalias() += xt.transpose() * da_r;
        Ur.grad.noalias() += hprev.transpose() * da_r;
        br.grad.row(0) += da_r.colwise().sum();
        dhprev.noalias() += da_r * Ur.value.transpose();

        // Update gate path.
        Wz.grad.noalias() += xt.transpose() * da_z;
        Uz.grad.noalias() += hprev.transpose() * da_z;
        bz.grad.row(0) += da_z.colwise().sum();
        dhprev.noalias() += da_z * Uz.value.transpose();

        dx.middleRows(base, batch) = da_z * Wz.value.transpose() + da_r * Wr.value.transpose() +
                                     da_h * Wh.value.transpose();
        dhnext = dhprev;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

template <class S>
DenseT<S>::DenseT(std::string name, int in, int out, Activation act, double leaky_alpha)
    : LayerT<S>(std::move(name)), in_(in), out_(out), act_(act), alpha_(leaky_alpha) {
    W.name = this->name() + ".W";
    W.value.setZero(in_, out_);
    b.name = this->name() + ".b";
    b.value.setZero(1, out_);
}

template <class S>
MatX<S> DenseT<S>::forward(const MatX<S>& x, int batch) {
    if (x.cols() != in_) throw std::invalid_argument(this->name() + ": input feature mismatch");
    (void)batch;
    x_ = x;
    MatX<S> a = x * W.value;
    a.rowwise() += b.value.row(0);
    switch (act_) {
        case Activation::Linear: y_ = a; break;
        case Activation::LeakyRelu:
            y_ = a.unaryExpr([this](S v) { return v >= S(0) ? v : S(alpha_) * v; });
            break;
        case Activation::Softmax: {
            y_.resize(a.rows(), a.cols());
            for (long r = 0; r < a.rows(); ++r) {
                const S max = a.row(r).maxCoeff();
                Eigen::Array<S, 1, Eigen::Dynamic> e = (a.row(r).array() - max).exp();
                y_.row(r) = (e / e.sum()).matrix();
            }
            break;
        }
    }
    return y_;
}

template <class S>
MatX<S> DenseT<S>::backward(const MatX<S>& dy, int batch) {
    if (dy.rows() != y_.rows() || dy.cols() != out_)
        throw std::invalid_argument(this->name() + ": gradient shape mismatch");
    (void)batch;
    MatX<S> da;
    switch (act_) {
        case Activation::Linear: da = dy; break;
        case Activation::LeakyRelu:
            // The post-activation sign equals the pre-activation sign.
            da = (dy.array() *
                  y_.unaryExpr([this](S v) { return v >= S(0) ? S(1) : S(alpha_); }).array())
                     .matrix();
            break;
        case Activation::Softmax: {
            da.resize(dy.rows(), dy.cols());
            for (long r = 0; r < dy.rows(); ++r) {
                const S dot = y_.row(r).dot(dy.row(r));
                da.row(r) = (y_.row(r).array() * (dy.row(r).array() - dot)).matrix();
            }
            break;
        }
    }
    W.grad.noalias() += x_.transpose() * da;
    b.grad.row(0) += da.colwise().sum();
    return da * W.value.transpose();
}

template <class S>
std::vector<std::uint8_t> DenseT<S>::sign_pattern() const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(y_.size()));
    const S* data = y_.data();
    for (long i = 0; i < y_.size(); ++i) out[static_cast<std::size_t>(i)] = data[i] >= S(0);
    return out;
}

// ---------------------------------------------------------------------------
// Dice loss
// ---------------------------------------------------------------------------

template <class S>
DiceResult<S> dice_loss(const MatX<S>& probs, const std::vector<int>& labels, int n_classes) {
    if (static_cast<long>(labels.size()) != probs.rows())
        throw std::invalid_argument("dice loss: one label per row required");
    if (probs.cols() != n_classes)
        throw std::invalid_argument("dice loss: probability columns != class count");

    const S eps = 1;
    std::vector<S> pred_sum(n_classes, 0), truth_sum(n_classes, 0), inter(n_classes, 0);
    long valid = 0;
    for (long r = 0; r < probs.rows(); ++r) {
        const int g = labels[static_cast<std::size_t>(r)];
        if (g < 0) continue;
        if (g >= n_classes) throw std::invalid_argument("dice loss: label outside class range");
        ++valid;
        truth_sum[g] += 1;
        inter[g] += probs(r, g);
        for (int c = 0; c < n_classes; ++c) pred_sum[c] += probs(r, c);
    }
    if (valid == 0) throw std::invalid_argument("dice loss: every step is masked");

    std::vector<S> dice(n_classes);
    S mean_dice = 0;
    for (int c = 0; c < n_classes; ++c) {
        dice[c] = (2 * inter[c] + eps) / (pred_sum[c] + truth_sum[c] + eps);
        mean_dice += dice[c];
    }
    mean_dice /= static_cast<S>(n_classes);

    DiceResult<S> out;
    out.loss = 1 - mean_dice;
    out.grad.setZero(probs.rows(), n_classes);
    const S scale = S(1) / static_cast<S>(n_classes);
    for (long r = 0; r < probs.rows(); ++r) {
        const int g = labels[static_cast<std::size_t>(r)];
        if (g < 0) continue;
        for (int c = 0; c < n_classes; ++c) {
            const S g_rc = c == g ? S(1) : S(0);
            out.grad(r, c) = -scale * (2 * g_rc - dice[c]) / (pred_sum[c] + truth_sum[c] + eps);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class S>
void AdamT<S>::step(const std::vector<ParamT<S>*>& params) {
    ++t_;
    const S b1 = static_cast<S>(beta1);
    const S b2 = static_cast<S>(beta2);
    const S corr1 = static_cast<S>(1.0 - std::pow(beta1, static_cast<double>(t_)));
    const S corr2 = static_cast<S>(1.0 - std::pow(beta2, static_cast<double>(t_)));
    for (ParamT<S>* p : params) {
        if (!p->trainable) continue;
        if (p->grad.size() == 0) continue;
        if (!p->grad.allFinite())
            throw std::runtime_error("non-finite gradient in parameter '" + p->name + "'");
        if (p->adam_m.size() == 0) {
            p->adam_m.setZero(p->value.rows(), p->value.cols());
            p->adam_v.setZero(p->value.rows(), p->value.cols());
        }
        p->adam_m = b1 * p->adam_m + (1 - b1) * p->grad;
        p->adam_v = (b2 * p->adam_v.array() + (1 - b2) * p->grad.array().square()).matrix();
        const auto mhat = p->adam_m.array() / corr1;
        const auto vhat = p->adam_v.array() / corr2;
        p->value.array() -= static_cast<S>(lr) * mhat / (vhat.sqrt() + static_cast<S>(eps));
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

template <class S>
NetworkT<S>::NetworkT(const ModelConfig& config) : cfg_(config) {
    build();
}

template <class S>
void NetworkT<S>::build() {
    cfg_.validate();
    const ResolvedStacks st = resolve_stacks(cfg_);

    int feat = cfg_.n_channels;
    int conv_index = 0;
    for (const ConvSpec& spec : st.conv) {
        ++conv_index;
        layers_.push_back(std::make_unique<Conv1dT<S>>("conv" + std::to_string(conv_index), feat,
                                                       spec.filters, spec.kernel));
        feat = spec.filters;
    }
    int gru_index = 0;
    for (int cells : st.gru) {
        ++gru_index;
        layers_.push_back(
            std::make_unique<GruT<S>>("gru" + std::to_string(gru_index), feat, cells));
        feat = cells;
    }
    layers_.push_back(std::make_unique<DenseT<S>>("dense1", feat, cfg_.dense_hidden,
                                                  Activation::LeakyRelu, cfg_.leaky_alpha));
    layers_.push_back(std::make_unique<DenseT<S>>("dense2", cfg_.dense_hidden, cfg_.n_classes,
                                                  Activation::Softmax));

    // Fan-in-scaled uniform init; biases start at zero. Every parameter has
    // its own named substream so identical names always get identical values.
    for (auto& layer : layers_) {
        for (ParamT<S>* p : layer->params()) {
            p->zero_grad();
            if (p->name.find(".b") != std::string::npos) continue;
            RngStream rng = RngStream::substream(cfg_.seed, p->name);
            const double limit = std::sqrt(1.0 / static_cast<double>(p->value.rows()));
            S* data = p->value.data();
            for (long i = 0; i < p->value.size(); ++i)
                data[i] = static_cast<S>(rng.uniform(-limit, limit));
        }
    }
}

template <class S>
std::vector<ParamT<S>*> NetworkT<S>::parameters() {
    std::vector<ParamT<S>*> out;
    for (auto& layer : layers_)
        for (ParamT<S>* p : layer->params()) out.push_back(p);
    return out;
}

template <class S>
long NetworkT<S>::parameter_count() const {
    long total = 0;
    for (const auto& layer : layers_)
        for (ParamT<S>* p : const_cast<LayerT<S>&>(*layer).params()) total += p->count();
    return total;
}

namespace {

/// Zero the rows of padded time steps. Re-applied between layers so a padded
/// suffix always looks exactly like the convolutions' own "same" zero padding
/// to the next layer up; valid-step outputs are then bit-identical no matter
/// how much trailing padding a batch carries.
template <class S>
void zero_padded_rows(MatX<S>& a, const BatchT<S>& batch) {
    for (int b = 0; b < batch.batch; ++b)
        for (int t = batch.valid[static_cast<std::size_t>(b)]; t < batch.length; ++t)
            a.row(static_cast<long>(t) * batch.batch + b).setZero();
}

} // namespace

template <class S>
MatX<S> NetworkT<S>::forward(const BatchT<S>& batch) {
    if (batch.features != cfg_.n_channels)
        throw std::invalid_argument("network: batch channels do not match the config");
    MatX<S> a = batch.x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        a = layers_[i]->forward(a, batch.batch);
        if (i + 1 < layers_.size()) zero_padded_rows(a, batch);
    }
    return a;
}

template <class S>
S NetworkT<S>::loss_and_gradients(const BatchT<S>& batch) {
    const MatX<S> probs = forward(batch);
    DiceResult<S> dice = dice_loss<S>(probs, batch.labels, cfg_.n_classes);
    MatX<S> grad = std::move(dice.grad);
    for (std::size_t i = layers_.size(); i-- > 0;) {
        grad = layers_[i]->backward(grad, batch.batch);
        // The forward pass zeroed this layer's input at padded rows, so the
        // gradient flowing into the layer below is zero there as well.
        if (i > 0) zero_padded_rows(grad, batch);
    }
    return dice.loss;
}

template <class S>
void NetworkT<S>::zero_grads() {
    for (auto& layer : layers_)
        for (ParamT<S>* p : layer->params()) p->zero_grad();
}

template <class S>
int NetworkT<S>::set_trainable(
    const std::function<bool(const std::string&, const std::string&)>& pred) {
    int selected = 0;
    for (auto& layer : layers_) {
        const bool on = pred(layer->name(), layer->kind());
        if (on) ++selected;
        for (ParamT<S>* p : layer->params()) p->trainable = on;
    }
    return selected;
}

template <class S>
std::vector<std::uint8_t> NetworkT<S>::kink_signature() const {
    std::vector<std::uint8_t> out;
    for (const auto& layer : layers_) {
        const auto* dense = dynamic_cast<const DenseT<S>*>(layer.get());
        if (!dense || dense->activation() != Activation::LeakyRelu) continue;
        const std::vector<std::uint8_t> part = dense->sign_pattern();
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, MatX<float>>> export_weights(Network& net) {
    std::vector<std::pair<std::string, MatX<float>>> out;
    for (ParamT<float>* p : net.parameters()) out.emplace_back(p->name, p->value);
    return out;
}

void import_weights(Network& net,
                    const std::vector<std::pair<std::string, MatX<float>>>& weights) {
    const std::vector<ParamT<float>*> params = net.parameters();
    if (params.size() != weights.size())
        throw std::invalid_argument("checkpoint weights do not match the model layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, value] = weights[i];
        if (params[i]->name != name || params[i]->value.rows() != value.rows() ||
            params[i]->value.cols() != value.cols())
            throw std::invalid_argument("checkpoint weight '" + name +
                                        "' does not match the model layout");
        params[i]->value = value;
    }
}

namespace {

constexpr const char* kCheckpointMagic = "statetrace-checkpoint";

void write_exact(std::ofstream& out, const void* data, std::size_t bytes) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

json stats_to_json(const NormStats& stats) {
    return json{{"mean", stats.mean}, {"stddev", stats.stddev}};
}

NormStats stats_from_json(const json& j) {
    NormStats stats;
    stats.mean = j.at("mean").get<std::vector<double>>();
    stats.stddev = j.at("stddev").get<std::vector<double>>();
    return stats;
}

// Blob layout is little-endian by definition; byte-identical round-trips are
// part of the contract, so a big-endian port would need explicit swapping.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

std::uint32_t to_bits(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    return bits;
}

float from_bits(std::uint32_t bits) {
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

} // namespace

void ModelCheckpoint::save(const std::filesystem::path& file) const {
    json header;
    header["magic"] = kCheckpointMagic;
    header["version"] = version;
    header["config"] = config_to_json(config);
    json schema_json = json::array();
    for (const ChannelSpec& spec : schema)
        schema_json.push_back({{"name", spec.name},
                               {"kind", spec.kind == ChannelKind::Input ? "input" : "output"},
                               {"unit", spec.unit}});
    header["schema"] = schema_json;
    header["catalog"] = catalog.states;
    header["sample_period"] = sample_period;
    header["stats"] = stats_to_json(stats);
    json index = json::array();
    for (const auto& [name, value] : weights)
        index.push_back({{"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
    header["weights"] = index;
    json hist = json::array();
    for (const EpochStats& e : history)
        hist.push_back({{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"val_loss", e.val_loss},
                        {"val_class_f1", e.val_class_f1},
                        {"val_cpd_f1", e.val_cpd_f1}});
    header["history"] = hist;

    const std::string text = header.dump();
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint file: " + file.string());
    const std::uint64_t size = text.size();
    write_exact(out, &size, sizeof size);
    write_exact(out, text.data(), text.size());
    std::vector<std::uint32_t> buffer;
    for (const auto& [name, value] : weights) {
        buffer.resize(static_cast<std::size_t>(value.size()));
        const float* data = value.data();
        for (long i = 0; i < value.size(); ++i)
            buffer[static_cast<std::size_t>(i)] = to_bits(data[i]);
        write_exact(out, buffer.data(), buffer.size() * sizeof(std::uint32_t));
    }
    if (!out) throw std::runtime_error("short write on checkpoint file: " + file.string());
}

ModelCheckpoint ModelCheckpoint::load(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint file: " + file.string());
    std::uint64_t size = 0;
    in.read(reinterpret_cast<char*>(&size), sizeof size);
    if (!in || size == 0 || size > (1ULL << 32))
        throw std::runtime_error("corrupt checkpoint header: " + file.string());
    std::string text(size, '\0');
    in.read(text.data(), static_cast<std::streamsize>(size));
    if (!in) throw std::runtime_error("corrupt checkpoint header: " + file.string());

    json header = json::parse(text);
    if (header.value("magic", "") != kCheckpointMagic)
        throw std::runtime_error("not a model checkpoint: " + file.string());

    ModelCheckpoint ckpt;
    ckpt.version = header.at("version").get<int>();
    ckpt.config = config_from_json(header.at("config"));
    for (const auto& spec : header.at("schema")) {
        ChannelSpec s;
        s.name = spec.at("name").get<std::string>();
        s.kind = spec.at("kind").get<std::string>() == "input" ? ChannelKind::Input
                                                               : ChannelKind::Output;
        s.unit = spec.at("unit").get<std::string>();
        ckpt.schema.push_back(std::move(s));
    }
    ckpt.catalog = StateCatalog(header.at("catalog").get<std::vector<std::string>>());
    ckpt.sample_period = header.at("sample_period").get<double>();
    ckpt.stats = stats_from_json(header.at("stats"));
    for (const auto& entry : header.at("history")) {
        EpochStats e;
        e.epoch = entry.at("epoch").get<int>();
        e.train_loss = entry.at("train_loss").get<double>();
        e.val_loss = entry.at("val_loss").get<double>();
        e.val_class_f1 = entry.at("val_class_f1").get<double>();
        e.val_cpd_f1 = entry.at("val_cpd_f1").get<double>();
        ckpt.history.push_back(e);
    }

    std::vector<std::uint32_t> buffer;
    for (const auto& entry : header.at("weights")) {
        const std::string name = entry.at("name").get<std::string>();
        const long rows = entry.at("rows").get<long>();
        const long cols = entry.at("cols").get<long>();
        MatX<float> value(rows, cols);
        buffer.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
        in.read(reinterpret_cast<char*>(buffer.data()),
                static_cast<std::streamsize>(buffer.size() * sizeof(std::uint32_t)));
        if (!in) throw std::runtime_error("truncated checkpoint weights: " + file.string());
        float* data = value.data();
        for (std::size_t i = 0; i < buffer.size(); ++i)
            data[i] = from_bits(buffer[i]);
        ckpt.weights.emplace_back(name, std::move(value));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

/// Number of leading rows before the all-zero padded suffix (the padding
/// convention: appended steps are exactly zero in every channel).
int detect_valid_length(const MultivariateTrace& trace) {
    int len = trace.length();
    while (len > 0 && (trace.samples.row(len - 1).array() == 0.0).all()) --len;
    return len;
}

std::vector<LabelSequence> predict_with_network(Network& net, const Dataset& dataset,
                                                const NormStats& stats, int batch_size) {
    std::vector<LabelSequence> out(dataset.items.size());
    const int n = dataset.size();
    const int pad_label = net.config().n_classes;
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        // Traces that arrive with a zero-padded suffix are trimmed to their
        // valid prefix so the padding never influences the prediction; the
        // output is re-extended with masked pad labels afterwards.
        std::vector<Dataset::Item> trimmed;
        trimmed.reserve(static_cast<std::size_t>(count));
        std::vector<const Dataset::Item*> items;
        std::vector<int> slot_index; // batch slot -> dataset index
        for (int i = 0; i < count; ++i) {
            const Dataset::Item& item = dataset.items[static_cast<std::size_t>(start + i)];
            const int valid_len = detect_valid_length(item.trace);
            if (valid_len == 0) {
                LabelSequence all_pad;
                all_pad.labels.assign(static_cast<std::size_t>(item.trace.length()), pad_label);
                all_pad.mask.assign(static_cast<std::size_t>(item.trace.length()), 0);
                out[static_cast<std::size_t>(start + i)] = std::move(all_pad);
                continue;
            }
            if (valid_len == item.trace.length()) {
                items.push_back(&item);
            } else {
                Dataset::Item copy;
                copy.id = item.id;
                copy.trace.schema = item.trace.schema;
                copy.trace.sample_period = item.trace.sample_period;
                copy.trace.samples = item.trace.samples.topRows(valid_len);
                for (const auto& entry : item.annotation.entries)
                    if (entry.t < valid_len) copy.annotation.entries.push_back(entry);
                if (copy.annotation.entries.empty()) copy.annotation.entries.push_back({0, 0});
                trimmed.push_back(std::move(copy));
                items.push_back(&trimmed.back());
            }
            slot_index.push_back(start + i);
        }
        if (items.empty()) continue;
        const Batch batch = make_batch(items, stats, net.config().n_classes);
        const MatX<float> probs = net.forward(batch);
        for (std::size_t b = 0; b < items.size(); ++b) {
            LabelSequence seq;
            const int len = batch.valid[b];
            seq.labels.resize(static_cast<std::size_t>(len));
            seq.mask.assign(static_cast<std::size_t>(len), 1);
            for (int t = 0; t < len; ++t) {
                const long row = static_cast<long>(t) * batch.batch + static_cast<long>(b);
                Eigen::RowVectorXf p = probs.row(row);
                seq.labels[static_cast<std::size_t>(t)] =
                    argmax_class(p.data(), static_cast<int>(p.size()));
            }
            const std::size_t idx = static_cast<std::size_t>(slot_index[b]);
            const std::size_t full = static_cast<std::size_t>(dataset.items[idx].trace.length());
            seq.labels.resize(full, pad_label);
            seq.mask.resize(full, 0);
            out[idx] = std::move(seq);
        }
    }
    return out;
}

struct ValMetrics {
    double loss = 0;
    double class_f1 = 0;
    double cpd_f1 = 0;
};

ValMetrics validate_network(Network& net, const Dataset& val, const NormStats& stats,
                            double tolerance_seconds) {
    ValMetrics metrics;
    const int n_classes = net.config().n_classes;
    const int batch_size = net.config().batch_size;

    double loss_sum = 0;
    long loss_batches = 0;
    for (int start = 0; start < val.size(); start += batch_size) {
        const int count = std::min(batch_size, val.size() - start);
        std::vector<const Dataset::Item*> items;
        for (int i = 0; i < count; ++i) items.push_back(&val.items[start + i]);
        const Batch batch = make_batch(items, stats, n_classes);
        const MatX<float> probs = net.forward(batch);
        loss_sum += dice_loss<float>(probs, batch.labels, n_classes).loss;
        ++loss_batches;
    }
    metrics.loss = loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0;

    const std::vector<LabelSequence> preds =
        predict_with_network(net, val, stats, batch_size);
    std::vector<LabelSequence> truth;
    truth.reserve(val.items.size());
    for (const auto& item : val.items)
        truth.push_back(expand_annotation(item.annotation, item.trace.length()));
    metrics.class_f1 = eval::classification_report(truth, preds, val.catalog).macro_f1;

    const eval::ToleranceMargin tau =
        eval::ToleranceMargin::from_seconds(tolerance_seconds, val.sample_period);
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto pred_cp = extract_change_points(preds[i]);
        const auto report =
            eval::cpd_score(val.items[i].annotation, pred_cp, tau);
        tp += report.tp;
        fp += report.fp;
        fn += report.fn;
    }
    metrics.cpd_f1 = eval::ScoreReport::from_counts(tp, fp, fn).f1;
    return metrics;
}

/// Shared optimizer loop for training and fine-tuning. Early-stops when the
/// validation classification F1 has not improved for `patience` epochs and
/// restores the best-scoring weights.
std::vector<EpochStats> run_training(Network& net, const Dataset& train, const Dataset& val,
                                     const NormStats& stats, double learning_rate, int max_epochs,
                                     int patience, std::uint64_t seed, double tolerance_seconds,
                                     std::ostream* log) {
    Adam adam;
    adam.lr = learning_rate;
    const std::vector<ParamT<float>*> params = net.parameters();
    const int batch_size = net.config().batch_size;
    const int n_classes = net.config().n_classes;

    std::vector<EpochStats> history;
    double best_f1 = -1;
    std::vector<std::pair<std::string, MatX<float>>> best_weights;
    int epochs_since_best = 0;

    std::vector<int> order(train.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 1; epoch <= max_epochs; ++epoch) {
        RngStream shuffle_rng =
            RngStream::substream(seed, "batch-order", static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        double loss_sum = 0;
        long batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(batch_size));
            std::vector<const Dataset::Item*> items;
            for (std::size_t i = start; i < end; ++i) items.push_back(&train.items[order[i]]);
            const Batch batch = make_batch(items, stats, n_classes);
            net.zero_grads();
            const float loss = net.loss_and_gradients(batch);
            if (!std::isfinite(loss)) {
                std::string ids;
                for (std::size_t i = start; i < end; ++i) {
                    if (!ids.empty()) ids += ", ";
                    ids += train.items[order[i]].id;
                }
                throw std::runtime_error("non-finite training loss in epoch " +
                                         std::to_string(epoch) + " on batch [" + ids + "]");
            }
            adam.step(params);
            loss_sum += loss;
            ++batches;
        }

        EpochStats stats_row;
        stats_row.epoch = epoch;
        stats_row.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        if (val.size() > 0) {
            const ValMetrics vm = validate_network(net, val, stats, tolerance_seconds);
            stats_row.val_loss = vm.loss;
            stats_row.val_class_f1 = vm.class_f1;
            stats_row.val_cpd_f1 = vm.cpd_f1;
        }
        history.push_back(stats_row);
        if (log)
            (*log) << "epoch " << epoch << " train_loss " << stats_row.train_loss << " val_loss "
                   << stats_row.val_loss << " val_class_f1 " << stats_row.val_class_f1
                   << " val_cpd_f1 " << stats_row.val_cpd_f1 << "\n";

        if (val.size() > 0) {
            if (stats_row.val_class_f1 > best_f1 + 1e-12) {
                best_f1 = stats_row.val_class_f1;
                best_weights = export_weights(net);
                epochs_since_best = 0;
            } else if (++epochs_since_best >= patience) {
                break;
            }
        }
    }
    if (!best_weights.empty()) import_weights(net, best_weights);
    return history;
}

void check_dataset_matches_config(const ModelConfig& config, const Dataset& dataset) {
    if (config.n_classes != dataset.catalog.size())
        throw std::invalid_argument("model n_classes does not match the dataset catalog");
    if (config.n_channels != static_cast<int>(dataset.schema.size()))
        throw std::invalid_argument("model n_channels does not match the dataset schema");
}

} // namespace

ModelCheckpoint train_model(const ModelConfig& config, const Dataset& train, const Dataset& val,
                            const TrainOptions& options) {
    config.validate();
    check_dataset_matches_config(config, train);
    if (train.size() == 0) throw std::invalid_argument("training split is empty");

    const NormStats stats = compute_norm_stats(train);
    Network net(config);
    const std::vector<EpochStats> history =
        run_training(net, train, val, stats, config.learning_rate, config.max_epochs,
                     config.patience, config.seed, options.tolerance_seconds, options.log);

    ModelCheckpoint ckpt;
    ckpt.config = config;
    ckpt.schema = train.schema;
    ckpt.catalog = train.catalog;
    ckpt.sample_period = train.sample_period;
    ckpt.stats = stats;
    ckpt.weights = export_weights(net);
    ckpt.history = history;
    return ckpt;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

int argmax_class(const float* row, int n) {
    int best = 0;
    for (int c = 1; c < n; ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

namespace {

Network network_from_checkpoint(const ModelCheckpoint& ckpt) {
    Network net(ckpt.config);
    import_weights(net, ckpt.weights);
    return net;
}

void check_trace_schema(const ModelCheckpoint& ckpt, const MultivariateTrace& trace) {
    if (trace.schema != ckpt.schema)
        throw std::invalid_argument("trace schema does not match the checkpoint");
}

} // namespace

LabelSequence predict_states(const ModelCheckpoint& checkpoint, const MultivariateTrace& trace) {
    check_trace_schema(checkpoint, trace);
    Network net = network_from_checkpoint(checkpoint);

    Dataset single;
    single.schema = checkpoint.schema;
    single.catalog = checkpoint.catalog;
    single.sample_period = checkpoint.sample_period;
    single.items.push_back({"trace", trace, ChangePointAnnotation{{{0, 0}}}});
    return predict_with_network(net, single, checkpoint.stats, 1).front();
}

std::vector<LabelSequence> predict_states(const ModelCheckpoint& checkpoint,
                                          const Dataset& dataset) {
    for (const auto& item : dataset.items) check_trace_schema(checkpoint, item.trace);
    Network net = network_from_checkpoint(checkpoint);
    return predict_with_network(net, dataset, checkpoint.stats, checkpoint.config.batch_size);
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

ModelCheckpoint fine_tune(const ModelCheckpoint& source, const Dataset& small_train,
                          const std::function<bool(const std::string&, const std::string&)>& trainable,
                          const FineTuneOptions& options) {
    check_dataset_matches_config(source.config, small_train);
    if (small_train.size() == 0) throw std::invalid_argument("fine-tune training set is empty");

    Network net = network_from_checkpoint(source);
    std::function<bool(const std::string&, const std::string&)> selector = trainable;
    if (!selector)
        selector = [](const std::string& name, const std::string&) {
            return name == "dense1" || name == "dense2";
        };
    if (net.set_trainable(selector) == 0)
        throw std::invalid_argument("fine-tune selector matches no layer");

    const std::vector<EpochStats> history = run_training(
        net, small_train, small_train, source.stats, options.learning_rate, options.max_epochs,
        options.patience, options.seed, options.tolerance_seconds, options.log);

    ModelCheckpoint ckpt = source;
    ckpt.weights = export_weights(net);
    ckpt.history = history;
    return ckpt;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradientCheckResult gradient_check(const ModelConfig& config, std::uint64_t seed, double epsilon,
                                   int length, long corrupt_flat_index,
                                   long max_entries_per_param) {
    ModelConfig cfg = config;
    cfg.validate();
    NetworkT<double> net(cfg);

    // Two sequences, the second one shorter, so masking is exercised.
    BatchT<double> batch;
    batch.batch = 2;
    batch.length = length;
    batch.features = cfg.n_channels;
    batch.valid = {length, std::max(2, (3 * length) / 4)};
    batch.x.setZero(static_cast<long>(length) * 2, cfg.n_channels);
    batch.labels.assign(static_cast<std::size_t>(length) * 2, -1);
    RngStream rng = RngStream::substream(seed, "gradient-check");
    for (int t = 0; t < length; ++t) {
        for (int b = 0; b < 2; ++b) {
            if (t >= batch.valid[b]) continue;
            const long row = static_cast<long>(t) * 2 + b;
            for (int c = 0; c < cfg.n_channels; ++c) batch.x(row, c) = rng.normal();
            batch.labels[static_cast<std::size_t>(row)] =
                static_cast<int>(rng.uniform_int(cfg.n_classes));
        }
    }

    net.zero_grads();
    net.loss_and_gradients(batch);

    std::vector<ParamT<double>*> params = net.parameters();
    std::vector<MatX<double>> analytic;
    analytic.reserve(params.size());
    for (ParamT<double>* p : params) analytic.push_back(p->grad);

    if (corrupt_flat_index >= 0) {
        long remaining = corrupt_flat_index;
        for (MatX<double>& g : analytic) {
            if (remaining < g.size()) {
                g.data()[remaining] += 1.0;
                break;
            }
            remaining -= g.size();
        }
    }

    // The finite-difference oracle runs in extended precision so its own
    // round-off stays far below the 1e-5 bar even on near-zero gradient
    // entries; the analytic gradients under test remain double precision.
    NetworkT<long double> probe_net(cfg);
    std::vector<ParamT<long double>*> probe_params = probe_net.parameters();
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        probe_params[pi]->value = params[pi]->value.cast<long double>();
    BatchT<long double> probe_batch;
    probe_batch.batch = batch.batch;
    probe_batch.length = batch.length;
    probe_batch.features = batch.features;
    probe_batch.valid = batch.valid;
    probe_batch.labels = batch.labels;
    probe_batch.x = batch.x.cast<long double>();

    const auto loss_only = [&]() -> long double {
        const MatX<long double> probs = probe_net.forward(probe_batch);
        return dice_loss<long double>(probs, probe_batch.labels, cfg.n_classes).loss;
    };

    loss_only();
    const std::vector<std::uint8_t> base_signature = probe_net.kink_signature();

    GradientCheckResult result;
    for (std::size_t pi = 0; pi < probe_params.size(); ++pi) {
        ParamT<long double>* p = probe_params[pi];
        long double* data = p->value.data();
        std::vector<long> entries(static_cast<std::size_t>(p->value.size()));
        std::iota(entries.begin(), entries.end(), 0L);
        if (max_entries_per_param > 0 &&
            p->value.size() > max_entries_per_param) {
            // Seeded partial Fisher-Yates keeps subsampled checks reproducible.
            RngStream pick = RngStream::substream(seed, "gradient-check-sample", pi);
            for (long k = 0; k < max_entries_per_param; ++k) {
                const long j = k + static_cast<long>(pick.uniform_int(
                                       static_cast<std::int64_t>(entries.size()) - k));
                std::swap(entries[static_cast<std::size_t>(k)],
                          entries[static_cast<std::size_t>(j)]);
            }
            entries.resize(static_cast<std::size_t>(max_entries_per_param));
            std::sort(entries.begin(), entries.end());
        }
        for (long i : entries) {
            const long double saved = data[i];
            long double step = static_cast<long double>(epsilon);
            long double cd = 0;
            for (int attempt = 0;; ++attempt) {
                // Fourth-order central stencil (Richardson-extrapolated
                // central differences): probes at +-step and +-step/2.
                bool on_branch = true;
                const auto probe = [&](long double offset) {
                    data[i] = saved + offset;
                    const long double value = loss_only();
                    on_branch = on_branch && probe_net.kink_signature() == base_signature;
                    return value;
                };
                const long double outer_plus = probe(step);
                const long double inner_plus = probe(step / 2);
                const long double inner_minus = probe(-step / 2);
                const long double outer_minus = probe(-step);
                data[i] = saved;
                cd = (-outer_plus + 8 * inner_plus - 8 * inner_minus + outer_minus) / (6 * step);
                if (on_branch || attempt >= 6) break;
                step /= 8; // a probe crossed a leaky-relu kink; retry closer in
            }
            const double an = analytic[pi].data()[i];
            const double rel = std::abs(an - static_cast<double>(cd)) /
                               std::max({std::abs(an), std::abs(static_cast<double>(cd)), 1e-8});
            ++result.parameters_checked;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = p->name;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Explicit instantiations (float for training/inference, double for checks)
// ---------------------------------------------------------------------------

template class Conv1dT<float>;
template class Conv1dT<double>;
template class Conv1dT<long double>;
template class GruT<float>;
template class GruT<double>;
template class GruT<long double>;
template class DenseT<float>;
template class DenseT<double>;
template class DenseT<long double>;
template class AdamT<float>;
template class AdamT<double>;
template class NetworkT<float>;
template class NetworkT<double>;
template class NetworkT<long double>;
template DiceResult<float> dice_loss<float>(const MatX<float>&, const std::vector<int>&, int);
template DiceResult<double> dice_loss<double>(const MatX<double>&, const std::vector<int>&, int);
template DiceResult<long double> dice_loss<long double>(const MatX<long double>&,
                                                        const std::vector<int>&, int);

} // namespace statetrace::nn
