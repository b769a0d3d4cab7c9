#pragma once

#include "statetrace/trace.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace statetrace::nn {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ConvSpec {
    int filters = 0;
    int kernel = 0;
    bool operator==(const ConvSpec&) const = default;
};

/// Network variants: the full convolutional-recurrent classifier, the two
/// single-family ablations, and the two parameter-matched single-family
/// references (two 200-cell recurrent layers; an enlarged convolutional stack
/// sized to the hybrid's parameter count within 10%).
enum class ModelVariant { Hybrid, CnnOnly, RnnOnly, CnnFull, RnnFull };

std::string to_string(ModelVariant variant);
ModelVariant variant_from_string(const std::string& name);

struct ModelConfig {
    std::vector<ConvSpec> conv_stack{{64, 3}, {64, 5}, {64, 10}, {64, 15}, {64, 20}};
    std::vector<int> gru_stack{128, 128};
    int dense_hidden = 128;
    double leaky_alpha = 0.3;
    int n_channels = 10;
    int n_classes = 11;
    double learning_rate = 1e-3;
    int batch_size = 16;
    int max_epochs = 60;
    int patience = 10;
    std::uint64_t seed = 1;
    ModelVariant variant = ModelVariant::Hybrid;

    /// Kernel sizes must be non-decreasing across the stack; every width,
    /// filter count, and cell count must be >= 1; the stacks the variant
    /// uses must be non-empty.
    void validate() const;

    std::string to_json_text() const;
    static ModelConfig from_json_text(const std::string& text);

    bool operator==(const ModelConfig&) const = default;
};

/// The stacks a variant actually instantiates (CnnFull resolves its matched
/// filter width here; RnnFull substitutes the fixed 200-cell stack).
struct ResolvedStacks {
    std::vector<ConvSpec> conv;
    std::vector<int> gru;
};

ResolvedStacks resolve_stacks(const ModelConfig& config);

/// Total trainable scalar count for the given config and variant.
long parameter_count(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A padded mini-batch. Row t*batch + b holds sequence b at time t, so each
/// time step is one contiguous block of rows. Padded steps carry zero inputs
/// and label -1; valid steps are always a prefix of each sequence.
template <class S>
struct BatchT {
    int batch = 0;
    int length = 0;
    int features = 0;
    MatX<S> x;                 // (length*batch) x features
    std::vector<int> valid;    // per-sequence valid lengths
    std::vector<int> labels;   // length*batch entries, -1 on padding

    int rows() const { return length * batch; }
};

using Batch = BatchT<float>;

/// Assemble a normalized batch from dataset items (applies the given stats,
/// zero inputs and -1 labels on the padded suffix of shorter sequences).
Batch make_batch(const std::vector<const Dataset::Item*>& items, const NormStats& stats,
                 int n_classes);

// ---------------------------------------------------------------------------
// Parameters and layers
// ---------------------------------------------------------------------------

template <class S>
struct ParamT {
    std::string name;
    MatX<S> value;
    MatX<S> grad;
    MatX<S> adam_m;
    MatX<S> adam_v;
    bool trainable = true;

    long count() const { return static_cast<long>(value.size()); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class S>
class LayerT {
public:
    virtual ~LayerT() = default;

    const std::string& name() const { return name_; }
    virtual std::string kind() const = 0;
    virtual int in_features() const = 0;
    virtual int out_features() const = 0;
    virtual bool recurrent() const { return false; }

    /// x has one row per (time, sequence) pair as in BatchT. Both passes use
    /// the batch size to recover the time structure. forward caches what
    /// backward needs; backward accumulates parameter gradients and returns
    /// the gradient with respect to the layer input.
    virtual MatX<S> forward(const MatX<S>& x, int batch) = 0;
    virtual MatX<S> backward(const MatX<S>& dy, int batch) = 0;

    virtual std::vector<ParamT<S>*> params() = 0;

protected:
    explicit LayerT(std::string name) : name_(std::move(name)) {}

private:
    std::string name_;
};

/// 1-D convolution over time, stride 1, zero "same" padding (left pad
/// (k-1)/2, right pad k/2) so the output length equals the input length.
/// Weight layout: (kernel*in) x out; rows ordered tap-major (tap 0 channels,
/// tap 1 channels, ...).
template <class S>
class Conv1dT final : public LayerT<S> {
public:
    Conv1dT(std::string name, int in, int out, int kernel);

    std::string kind() const override { return "conv1d"; }
    int in_features() const override { return in_; }
    int out_features() const override { return out_; }
    int kernel() const { return kernel_; }

    MatX<S> forward(const MatX<S>& x, int batch) override;
    MatX<S> backward(const MatX<S>& dy, int batch) override;
    std::vector<ParamT<S>*> params() override { return {&W, &b}; }

    ParamT<S> W; // (kernel*in) x out
    ParamT<S> b; // 1 x out

private:
    int in_, out_, kernel_;
    MatX<S> cols_; // cached im2col matrix, (length*batch) x kernel*in
};

/// Gated recurrent unit, sequence-to-sequence, h0 = 0. Gate convention:
///   z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
///   r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
///   hc_t = tanh(x_t Wh + (r_t . h_{t-1}) Uh + bh)
///   h_t = (1 - z_t) . h_{t-1} + z_t . hc_t
template <class S>
class GruT final : public LayerT<S> {
public:
    GruT(std::string name, int in, int hidden);

    std::string kind() const override { return "gru"; }
    int in_features() const override { return in_; }
    int out_features() const override { return hidden_; }
    bool recurrent() const override { return true; }

    MatX<S> forward(const MatX<S>& x, int batch) override;
    MatX<S> backward(const MatX<S>& dy, int batch) override;
    std::vector<ParamT<S>*> params() override {
        return {&Wz, &Wr, &Wh, &Uz, &Ur, &Uh, &bz, &br, &bh};
    }

    ParamT<S> Wz, Wr, Wh; // in x hidden
    ParamT<S> Uz, Ur, Uh; // hidden x hidden
    ParamT<S> bz, br, bh; // 1 x hidden

private:
    int in_, hidden_;
    MatX<S> x_, z_, r_, hc_, h_; // cached per-step activations, (length*batch) x dim
};

enum class Activation { Linear, LeakyRelu, Softmax };

/// Time-distributed dense layer: the same weights apply independently at
/// every time step. Softmax normalizes across the class axis per row.
template <class S>
class DenseT final : public LayerT<S> {
public:
    DenseT(std::string name, int in, int out, Activation act, double leaky_alpha = 0.3);

    std::string kind() const override { return "dense"; }
    int in_features() const override { return in_; }
    int out_features() const override { return out_; }
    Activation activation() const { return act_; }

    MatX<S> forward(const MatX<S>& x, int batch) override;
    MatX<S> backward(const MatX<S>& dy, int batch) override;
    std::vector<ParamT<S>*> params() override { return {&W, &b}; }

    /// Sign pattern of the last forward's pre-activations (the post-activation
    /// sign is identical). Used to detect finite-difference probes stepping
    /// across the leaky-relu kink.
    std::vector<std::uint8_t> sign_pattern() const;

    ParamT<S> W; // in x out
    ParamT<S> b; // 1 x out

private:
    int in_, out_;
    Activation act_;
    double alpha_;
    MatX<S> x_, y_; // cached input and post-activation output
};

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

template <class S>
struct DiceResult {
    S loss = 0;
    MatX<S> grad; // dloss/dprobs, zero on masked rows
};

/// Soft dice overlap loss with epsilon 1 averaged over all classes. Rows
/// whose label is -1 (padding) are excluded from every sum and receive zero
/// gradient. Classes absent from both prediction and truth contribute a
/// perfect overlap of 1 (zero loss). Throws when every row is masked.
template <class S>
DiceResult<S> dice_loss(const MatX<S>& probs, const std::vector<int>& labels, int n_classes);

/// Adam with bias correction. step() throws (naming the parameter) when any
/// gradient entry is non-finite; frozen parameters are skipped entirely.
template <class S>
class AdamT {
public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(const std::vector<ParamT<S>*>& params);
    long steps_taken() const { return t_; }

private:
    long t_ = 0;
};

using Adam = AdamT<float>;

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

template <class S>
class NetworkT {
public:
    NetworkT() = default;
    /// Build the variant's layer graph and initialize weights from the seed
    /// (fan-in-scaled uniform; each parameter draws from its own named
    /// substream so layout changes never reshuffle unrelated weights).
    explicit NetworkT(const ModelConfig& config);

    const ModelConfig& config() const { return cfg_; }
    int layer_count() const { return static_cast<int>(layers_.size()); }
    LayerT<S>& layer(int i) { return *layers_[i]; }
    const LayerT<S>& layer(int i) const { return *layers_[i]; }

    std::vector<ParamT<S>*> parameters();
    long parameter_count() const;

    /// Forward pass to per-step class probabilities, (length*batch) x N_s.
    MatX<S> forward(const BatchT<S>& batch);

    /// Forward + dice loss + full backward; parameter gradients are
    /// accumulated (call zero_grads between steps).
    S loss_and_gradients(const BatchT<S>& batch);

    void zero_grads();

    /// Marks parameters trainable per layer predicate (name, kind). Returns
    /// the number of layers selected.
    int set_trainable(const std::function<bool(const std::string&, const std::string&)>& pred);

    /// Concatenated leaky-relu sign patterns over all dense layers after the
    /// most recent forward pass (empty when none use that activation).
    std::vector<std::uint8_t> kink_signature() const;

private:
    void build();

    ModelConfig cfg_;
    std::vector<std::unique_ptr<LayerT<S>>> layers_;
};

using Network = NetworkT<float>;

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_class_f1 = 0;
    double val_cpd_f1 = 0;
};

/// A self-contained trained model: config, schema, catalog, normalization
/// stats, named weight arrays, and the training history. Serialized as a
/// JSON header plus little-endian IEEE-754 binary32 weight blocks, so
/// save -> load -> predict is bit-identical to predicting before the save.
struct ModelCheckpoint {
    int version = 1;
    ModelConfig config;
    std::vector<ChannelSpec> schema;
    StateCatalog catalog;
    double sample_period = 0.2;
    NormStats stats;
    std::vector<std::pair<std::string, MatX<float>>> weights;
    std::vector<EpochStats> history;

    void save(const std::filesystem::path& file) const;
    static ModelCheckpoint load(const std::filesystem::path& file);
};

/// Copy weights out of / into a float network (names and shapes must match).
std::vector<std::pair<std::string, MatX<float>>> export_weights(Network& net);
void import_weights(Network& net, const std::vector<std::pair<std::string, MatX<float>>>& weights);

// ---------------------------------------------------------------------------
// Training, prediction, fine-tuning
// ---------------------------------------------------------------------------

struct TrainOptions {
    double tolerance_seconds = 5.0; // tau for the per-epoch validation CPD F1
    std::ostream* log = nullptr;    // optional one-line-per-epoch progress
};

/// Train a fresh model of the given config: dice loss, Adam, shuffled
/// batches, early stopping on the validation classification F1 plateau
/// (patience from the config) with best-weights restore. Normalization
/// stats come from the training split and ride along in the checkpoint.
/// Deterministic for a fixed config seed. Throws on non-finite loss, naming
/// the offending batch.
ModelCheckpoint train_model(const ModelConfig& config, const Dataset& train, const Dataset& val,
                            const TrainOptions& options = {});

/// Argmax with ties broken toward the lowest class id.
int argmax_class(const float* row, int n);

/// Per-step argmax prediction. The trace must match the checkpoint schema.
LabelSequence predict_states(const ModelCheckpoint& checkpoint, const MultivariateTrace& trace);
std::vector<LabelSequence> predict_states(const ModelCheckpoint& checkpoint, const Dataset& dataset);

struct FineTuneOptions {
    int max_epochs = 40;
    int patience = 10;
    double learning_rate = 5e-4;
    double tolerance_seconds = 5.0;
    std::uint64_t seed = 7;
    std::ostream* log = nullptr;
};

/// Transfer learning: continue from a trained checkpoint on a small labeled
/// dataset, updating only the layers the selector picks (default: the final
/// two dense layers). Frozen weights are bit-identical before and after; the
/// source checkpoint's normalization stats are reused. Throws when the
/// selector matches no layer.
ModelCheckpoint fine_tune(
    const ModelCheckpoint& source, const Dataset& small_train,
    const std::function<bool(const std::string&, const std::string&)>& trainable = {},
    const FineTuneOptions& options = {});

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradientCheckResult {
    double max_rel_error = 0;
    std::string worst_param;
    long parameters_checked = 0;
};

/// Compare every analytic parameter gradient of a double-precision network
/// against central finite differences of the dice loss on a small random
/// batch (two sequences, one shorter to exercise masking). The relative
/// error is |analytic - cd| / max(|analytic|, |cd|, 1e-8), maximized over
/// all parameter entries. Central differences are invalid across the
/// leaky-relu kink, so any probe that flips a pre-activation sign retries
/// with a smaller step until both sides stay on the unperturbed branch.
/// corrupt_flat_index >= 0 perturbs that analytic gradient entry by 1.0
/// first, for verifying the check detects bugs.
/// max_entries_per_param > 0 limits each parameter matrix to a seeded random
/// subsample of that many entries, so architectures with very large fixed
/// weight matrices stay checkable in bounded time.
GradientCheckResult gradient_check(const ModelConfig& config, std::uint64_t seed,
                                   double epsilon = 1e-4, int length = 12,
                                   long corrupt_flat_index = -1,
                                   long max_entries_per_param = -1);

} // namespace statetrace::nn
