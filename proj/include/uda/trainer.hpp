#pragma once

// Two-phase training: supervised source pretraining, then unsupervised
// adaptation to the target domain. Also the supervised target fine-tuning
// upper bound and inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uda/losses.hpp"
#include "uda/metrics.hpp"
#include "uda/nets.hpp"
#include "uda/synthdata.hpp"

namespace uda {

enum class Phase { source = 0, adapt = 1, oracle = 2 };
enum class TestLatent { mu, sample };

std::string_view phase_name(Phase p);

struct TrainConfig {
    int source_epochs = 30;
    int uda_epochs = 80;
    int oracle_epochs = 10;
    int batch_size = 8;
    // UDA and oracle epochs are a fixed number of steps; 0 means one pass over
    // the target slices.
    int uda_steps_per_epoch = 16;
    int oracle_steps_per_epoch = 0;
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    LossWeights weights;
    std::vector<double> class_weights;  // empty: background 0.2, foreground 1.0
    KlReduction kl_reduction = KlReduction::mean;
    GanMode gan_mode = GanMode::non_saturating;
    bool disable_kl = false;
    bool disable_adv = false;
    int disc_steps = 1;  // discriminator updates per generator update
    int eval_every = 1;
    bool early_stop = false;
    int patience = 10;  // evaluations without improvement
    TestLatent test_latent = TestLatent::mu;
    // Start e_t/d_t as copies of e_s/d_s. Off by default: with instance norm in the
    // front, an inverted-contrast target needs the copied first-layer filters to
    // change sign, and adaptation often stalls at zero Dice.
    bool init_target_from_source = false;
    bool augment = true;
    AugmentationSpec augmentation;
    std::int64_t max_steps = 0;  // stop a phase early after this many steps (0: no limit)

    void validate() const;
    // Weights after the ablation flags.
    [[nodiscard]] LossWeights effective_weights() const;
    [[nodiscard]] ClassWeights resolved_class_weights(int num_classes) const;
};

// Infinite stream of batches over a slice pool: successive shuffled passes.
struct StreamState {
    int pass = 0;
    int index = 0;
};

class BatchStream {
public:
    BatchStream(const std::vector<Volume>* volumes, int batch_size, std::uint64_t seed, const AugmentationSpec* spec,
                StreamState state = {});
    Batch next();
    [[nodiscard]] const StreamState& state() const { return state_; }
    [[nodiscard]] int batches_per_pass() const { return static_cast<int>(plan_.size()); }

private:
    void replan();
    const std::vector<Volume>* volumes_;
    int batch_size_;
    std::uint64_t seed_;
    const AugmentationSpec* spec_;
    StreamState state_;
    std::vector<std::vector<SliceRef>> plan_;
};

inline constexpr int kNumLogTerms = 9;

struct LogRow {
    std::int64_t step = 0;
    int epoch = 0;
    Phase phase = Phase::source;
    std::vector<double> terms;     // loss_term_names() order; 0 for absent terms
    double disc = 0.0;             // discriminator loss
    std::vector<double> weighted;  // rec, kl, seg, adv, cyc groups after weighting
    double total = 0.0;
    double wall_ms = 0.0;
};

std::string log_header();
std::string log_line(const LogRow& row);

struct EvalRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double mean_dice = 0.0;
};

struct TrainState {
    Phase phase = Phase::source;
    std::int64_t step = 0;  // optimizer steps within the phase
    int epoch = 0;          // completed epochs
    int batch_in_epoch = 0;
    StreamState source_stream, target_stream;
    std::vector<LogRow> history;
    std::vector<EvalRecord> evals;
    double best_val_dice = -1.0;
    int best_epoch = -1;
    int evals_since_best = 0;
    bool stopped_early = false;
};

template <class T>
struct AdamSlot {
    std::vector<T> m, v;
    std::int64_t t = 0;
};

// Bias-corrected Adam over a fixed parameter list. Parameters without a
// gradient in a step are left untouched, moments included.
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
    void step(const std::vector<ad::Parameter<T>*>& params);
    std::vector<AdamSlot<T>>& slots() { return slots_; }
    [[nodiscard]] const std::vector<AdamSlot<T>>& slots() const { return slots_; }

private:
    double lr_ = 2e-4, b1_ = 0.5, b2_ = 0.999, eps_ = 1e-8;
    std::vector<AdamSlot<T>> slots_;
};

// Forward results of one generator step, kept for the discriminator update.
template <class T>
struct GeneratorForward {
    LossTerms<T> terms;
    Tensor<T> x_s;   // real source images
    Tensor<T> x_ss;  // source reconstructions (detached)
    Tensor<T> x_ts;  // target translated to source (detached, adapt only)
    Tensor<T> x_st;  // source translated to target, input of the task route (adapt only)
};

template <class T>
class Trainer {
public:
    Trainer(NetworkSet<T> nets, TrainConfig config);

    NetworkSet<T>& nets() { return nets_; }
    [[nodiscard]] const NetworkSet<T>& nets() const { return nets_; }
    TrainState& state() { return state_; }
    [[nodiscard]] const TrainState& state() const { return state_; }
    [[nodiscard]] const TrainConfig& config() const { return config_; }

    // Streams each log row as CSV; `header` writes the column line first.
    void set_log_stream(std::ostream* os, bool header);
    // Zeroes wall-clock columns so logs are byte-comparable.
    void set_deterministic_log(bool on) { deterministic_log_ = on; }
    // Called after every completed epoch (after its evaluation).
    void set_epoch_callback(std::function<void()> fn) { on_epoch_ = std::move(fn); }
    // Holds the stop-gradient input of the task route at a fixed value, so
    // finite differences see the same function backward differentiates.
    void pin_task_input(std::optional<Tensor<T>> x_st) { pinned_x_st_ = std::move(x_st); }

    // Full phases. Each resumes from state() when it already holds progress in
    // the same phase; otherwise it resets the state for the phase.
    void train_source(const std::vector<Volume>& source, const std::vector<Volume>* source_val);
    void adapt(const std::vector<Volume>& source, const std::vector<Volume>& target,
               const std::vector<Volume>* target_val);
    void finetune_oracle(const std::vector<Volume>& target, const std::vector<Volume>* target_val);

    // Single optimizer steps. step_source and step_oracle use only the first batch.
    LogRow step_source(const Batch& s);
    LogRow step_adapt(const Batch& s, const Batch& t);
    LogRow step_oracle(const Batch& t);

    // Generator-side terms for one step; RNG streams depend on (seed, phase, step).
    GeneratorForward<T> forward_generator(Phase phase, const Batch& s, const Batch* t, std::int64_t step) const;
    // Discriminator objective on detached images; fakes may hold one or two sets.
    ad::Var<T> discriminator_loss(const Tensor<T>& real, const std::vector<const Tensor<T>*>& fakes) const;

    // Per-volume prediction. `domain` selects the encoder front.
    [[nodiscard]] LabelMap infer(const Volume& v, Domain domain) const;
    [[nodiscard]] MetricsReport evaluate(const std::vector<Volume>& vols, Domain domain, const EvalOptions& opt) const;

    void save_checkpoint(const std::filesystem::path& stem) const;
    void load_checkpoint(const std::filesystem::path& stem);

    void begin_phase(Phase phase);

private:
    void emit(LogRow& row, double wall_ms);
    void maybe_evaluate(const std::vector<Volume>* val, Domain domain);
    void finish_phase(bool complete);
    LogRow make_row(Phase phase, const LossTerms<T>& terms, double total, double disc) const;
    double disc_update(const Tensor<T>& real, const std::vector<const Tensor<T>*>& fakes);

    NetworkSet<T> nets_;
    TrainConfig config_;
    ClassWeights class_weights_;
    // One optimizer over every parameter; generator and discriminator steps
    // touch disjoint gradient sets.
    Adam<T> opt_;
    TrainState state_;
    std::vector<Tensor<T>> best_snapshot_;
    std::ostream* log_ = nullptr;
    bool deterministic_log_ = false;
    std::function<void()> on_epoch_;
    std::optional<Tensor<T>> pinned_x_st_;
};

// Reads the component layout and TrainConfig-independent metadata from a
// checkpoint manifest.
struct CheckpointInfo {
    NetConfig net;
    std::uint64_t init_seed = 0;
    int value_bytes = 4;
};
CheckpointInfo read_checkpoint_info(const std::filesystem::path& stem);

// Loss-curve friendly CSV parsing of a training log (header + rows).
struct LogTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    [[nodiscard]] int column(const std::string& name) const;
};
LogTable parse_log_csv(const std::string& text);

// 3 consecutive slices of `v` starting at the middle, adjusted so that at
// least three foreground classes are present in each.
Volume few_shot_slices(const Volume& v, int count = 3);

// Components holding at least one nonzero gradient entry.
template <class T>
ComponentMask grad_support(NetworkSet<T>& nets);

// Population std over |mean|; NaN when the mean is zero.
double coefficient_of_variation(const std::vector<double>& xs);

}  // namespace uda
