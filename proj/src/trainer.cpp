#include "uda/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "uda/io.hpp"
#include "uda/rng.hpp"

namespace uda {

namespace fs = std::filesystem;

std::string_view phase_name(Phase p) {
    switch (p) {
        case Phase::source:
            return "source";
        case Phase::adapt:
            return "adapt";
        case Phase::oracle:
            return "oracle";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (source_epochs < 0 || uda_epochs < 0 || oracle_epochs < 0) throw ConfigError("epoch counts must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (uda_steps_per_epoch < 0 || oracle_steps_per_epoch < 0) throw ConfigError("steps per epoch must be >= 0");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
    if (disc_steps < 0) throw ConfigError("disc_steps must be >= 0");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    weights.validate();
    augmentation.validate();
}

LossWeights TrainConfig::effective_weights() const {
    LossWeights w = weights;
    if (disable_kl) w.kl = 0.0;
    if (disable_adv) w.adv = 0.0;
    return w;
}

ClassWeights TrainConfig::resolved_class_weights(int num_classes) const {
    if (class_weights.empty()) return ClassWeights::defaults(num_classes);
    if (static_cast<int>(class_weights.size()) != num_classes) {
        throw ConfigError("class_weights needs " + std::to_string(num_classes) + " entries");
    }
    return ClassWeights(class_weights);
}

BatchStream::BatchStream(const std::vector<Volume>* volumes, int batch_size, std::uint64_t seed,
                         const AugmentationSpec* spec, StreamState state)
    : volumes_(volumes), batch_size_(batch_size), seed_(seed), spec_(spec), state_(state) {
    replan();
}

void BatchStream::replan() { plan_ = plan_epoch(*volumes_, batch_size_, seed_, state_.pass); }

Batch BatchStream::next() {
    if (state_.index >= static_cast<int>(plan_.size())) {
        ++state_.pass;
        state_.index = 0;
        replan();
    }
    return make_batch(*volumes_, plan_[static_cast<std::size_t>(state_.index++)], spec_, seed_, state_.pass);
}

std::string log_header() {
    std::string h = "step,epoch,phase";
    for (const auto& n : loss_term_names()) h += "," + n;
    h += ",disc,w_rec,w_kl,w_seg,w_adv,w_cyc,total,wall_ms";
    return h;
}

std::string log_line(const LogRow& r) {
    std::ostringstream os;
    char buf[40];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        os << ',' << buf;
    };
    os << r.step << ',' << r.epoch << ',' << phase_name(r.phase);
    for (double v : r.terms) num(v);
    num(r.disc);
    for (double v : r.weighted) num(v);
    num(r.total);
    std::snprintf(buf, sizeof(buf), "%.3f", r.wall_ms);
    os << ',' << buf;
    return os.str();
}

template <class T>
void Adam<T>::step(const std::vector<ad::Parameter<T>*>& params) {
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size()) throw ConfigError("optimizer: parameter list changed size");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto* p = params[i];
        if (!p->has_grad()) continue;
        auto& s = slots_[i];
        const std::size_t n = p->numel();
        if (s.t == 0) {
            s.m.assign(n, T(0));
            s.v.assign(n, T(0));
        }
        ++s.t;
        const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
        const T c1 = static_cast<T>(1.0 - std::pow(b1_, static_cast<double>(s.t)));
        const T c2 = static_cast<T>(1.0 - std::pow(b2_, static_cast<double>(s.t)));
        const T lr = static_cast<T>(lr_), eps = static_cast<T>(eps_);
        const auto& g = p->grad();
        auto& w = p->value().data;
        for (std::size_t j = 0; j < n; ++j) {
            s.m[j] = b1 * s.m[j] + (T(1) - b1) * g[j];
            s.v[j] = b2 * s.v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= lr * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + eps);
        }
    }
}

template <class T>
ComponentMask grad_support(NetworkSet<T>& nets) {
    ComponentMask m;
    for (Component c : kAllComponents) {
        for (auto* p : nets.parameters(c)) {
            if (!p->has_grad()) continue;
            const auto& g = p->grad();
            if (std::any_of(g.begin(), g.end(), [](T v) { return v != T(0); })) {
                m.set(static_cast<std::size_t>(c));
                break;
            }
        }
    }
    return m;
}

namespace {

template <class T>
Tensor<T> to_t(const Tensor<float>& x) {
    if constexpr (std::is_same_v<T, float>) {
        return x;
    } else {
        return x.template cast<T>();
    }
}

enum RngPurpose : std::uint64_t {
    kEpsSource = 1,
    kEpsTarget = 2,
    kEpsTask = 3,
    kStreamSource = 10,
    kStreamTarget = 11
};

}  // namespace

template <class T>
Trainer<T>::Trainer(NetworkSet<T> nets, TrainConfig config) : nets_(std::move(nets)), config_(std::move(config)) {
    config_.validate();
    class_weights_ = config_.resolved_class_weights(nets_.config().num_classes);
    opt_ = Adam<T>(config_.lr, config_.beta1, config_.beta2, config_.adam_eps);
}

template <class T>
void Trainer<T>::set_log_stream(std::ostream* os, bool header) {
    log_ = os;
    if (log_ && header) *log_ << log_header() << '\n';
}

template <class T>
void Trainer<T>::begin_phase(Phase phase) {
    if (state_.phase == phase) return;
    state_ = TrainState{};
    state_.phase = phase;
    best_snapshot_.clear();
}

template <class T>
GeneratorForward<T> Trainer<T>::forward_generator(Phase phase, const Batch& s, const Batch* t,
                                                  std::int64_t step) const {
    const auto W = config_.effective_weights();
    const int K = nets_.config().num_classes;
    auto rng_for = [&](std::uint64_t purpose) {
        return std::mt19937_64(
            derive_seed(config_.seed, {static_cast<std::uint64_t>(phase), static_cast<std::uint64_t>(step), purpose}));
    };
    const ComponentMask none;
    GeneratorForward<T> out;
    auto& L = out.terms;

    if (phase == Phase::oracle) {
        validate_labels(s.labels, K);
        auto x = ad::constant(to_t<T>(s.images));
        const auto enc = mask_of({Component::e_t, Component::e_z});
        const auto dec = mask_of({Component::d_z, Component::d_t});
        auto post = nets_.encode(x, Domain::target, enc);
        auto rng = rng_for(kEpsTarget);
        auto z = sample(post, rng);
        auto x_tt = nets_.decode(z, Domain::target, dec);
        L.rec_t = recon_loss(x_tt, x);
        L.kl_t = kl_loss(post, config_.kl_reduction);
        L.seg = seg_loss(nets_.segment(z, mask_of({Component::seg})), s.labels, class_weights_);
        return out;
    }

    // Source route: reconstruction, prior matching, segmentation, adversarial.
    validate_labels(s.labels, K);
    const auto gs = mask_of({Component::e_s, Component::e_z, Component::d_z, Component::d_s, Component::seg});
    out.x_s = to_t<T>(s.images);
    auto x_s = ad::constant(out.x_s);
    auto post_s = nets_.encode(x_s, Domain::source, gs);
    auto rng_s = rng_for(kEpsSource);
    auto z_s = sample(post_s, rng_s);
    auto x_ss = nets_.decode(z_s, Domain::source, gs);
    out.x_ss = x_ss.value();
    L.rec_s = recon_loss(x_ss, x_s);
    L.kl_s = kl_loss(post_s, config_.kl_reduction);
    L.seg = seg_loss(nets_.segment(z_s, gs), s.labels, class_weights_);
    if (W.adv > 0) L.adv_s = adv_loss_gen(nets_.discriminate(x_ss, none), config_.gan_mode);
    if (phase == Phase::source) return out;

    if (!t) throw ConfigError("adaptation step needs a target batch");
    auto x_t = ad::constant(to_t<T>(t->images));

    // Target VAE: only the target front and tail learn here.
    auto post_t = nets_.encode(x_t, Domain::target, mask_of({Component::e_t}));
    auto rng_t = rng_for(kEpsTarget);
    auto z_t = sample(post_t, rng_t);
    auto x_tt = nets_.decode(z_t, Domain::target, mask_of({Component::d_t}));
    L.rec_t = recon_loss(x_tt, x_t);
    L.kl_t = kl_loss(post_t, config_.kl_reduction);

    // Target rendered by the frozen source decoder; its gradients reach e_t
    // through z_t only.
    auto x_ts = nets_.decode(z_t, Domain::source, none);
    out.x_ts = x_ts.value();
    if (W.adv > 0) L.adv_t = adv_loss_gen(nets_.discriminate(x_ts, none), config_.gan_mode);

    // T -> S -> T through the frozen source route, mean latent.
    auto post_back = nets_.encode(x_ts, Domain::source, none);
    auto x_back = nets_.decode(post_back.mu, Domain::target, mask_of({Component::d_t}));
    L.cyc = cycle_loss(x_back, x_t);

    // Task consistency on source images rendered in the target domain.
    out.x_st = pinned_x_st_ ? *pinned_x_st_ : nets_.decode(ad::detach(z_s), Domain::target, none).value();
    auto post_st = nets_.encode(ad::constant(out.x_st), Domain::target, mask_of({Component::e_z}));
    auto rng_task = rng_for(kEpsTask);
    auto z_st = sample(post_st, rng_task);
    L.task = task_consistency_loss(nets_.segment(z_st, mask_of({Component::seg})), s.labels, class_weights_);
    return out;
}

template <class T>
ad::Var<T> Trainer<T>::discriminator_loss(const Tensor<T>& real, const std::vector<const Tensor<T>*>& fakes) const {
    if (fakes.empty()) throw ConfigError("discriminator_loss: no fake images");
    const auto dm = mask_of({Component::disc});
    auto s_real = nets_.discriminate(ad::constant(real), dm);
    std::vector<ad::Var<T>> parts;
    for (const auto* f : fakes) parts.push_back(adv_loss_disc(s_real, nets_.discriminate(ad::constant(*f), dm)));
    if (parts.size() == 1) return parts[0];
    return ad::weighted_sum(parts, std::vector<T>(parts.size(), T(1) / static_cast<T>(parts.size())));
}

template <class T>
double Trainer<T>::disc_update(const Tensor<T>& real, const std::vector<const Tensor<T>*>& fakes) {
    double last = 0.0;
    for (int k = 0; k < config_.disc_steps; ++k) {
        nets_.zero_grad();
        auto loss = discriminator_loss(real, fakes);
        last = static_cast<double>(loss.item());
        if (!std::isfinite(last)) throw NumericalError("non-finite discriminator loss");
        ad::backward(loss);
        opt_.step(nets_.parameters());
    }
    nets_.zero_grad();
    return last;
}

template <class T>
LogRow Trainer<T>::make_row(Phase phase, const LossTerms<T>& terms, double total, double disc) const {
    const auto W = config_.effective_weights();
    LogRow r;
    r.step = state_.step;
    r.epoch = state_.epoch;
    r.phase = phase;
    r.terms = term_values(terms);
    r.disc = disc;
    const auto& v = r.terms;  // rec_s, rec_t, kl_s, kl_t, seg, task, adv_s, adv_t, cyc
    r.weighted = {W.rec * (v[0] + v[1]), W.kl * (v[2] + v[3]), W.seg * (v[4] + v[5]), W.adv * (v[6] + v[7]),
                  W.cyc * v[8]};
    r.total = total;
    return r;
}

template <class T>
void Trainer<T>::emit(LogRow& row, double wall_ms) {
    row.wall_ms = deterministic_log_ ? 0.0 : wall_ms;
    if (log_) {
        *log_ << log_line(row) << '\n';
        log_->flush();
    }
    state_.history.push_back(row);
}

namespace {
double ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace

template <class T>
LogRow Trainer<T>::step_source(const Batch& s) {
    const auto t0 = std::chrono::steady_clock::now();
    nets_.zero_grad();
    auto fw = forward_generator(Phase::source, s, nullptr, state_.step);
    auto total = total_loss(fw.terms, config_.effective_weights());
    ad::backward(total);
    opt_.step(nets_.parameters());
    double d = 0.0;
    if (config_.effective_weights().adv > 0) d = disc_update(fw.x_s, {&fw.x_ss});
    nets_.zero_grad();
    LogRow row = make_row(Phase::source, fw.terms, static_cast<double>(total.item()), d);
    ++state_.step;
    emit(row, ms_since(t0));
    return row;
}

template <class T>
LogRow Trainer<T>::step_adapt(const Batch& s, const Batch& t) {
    const auto t0 = std::chrono::steady_clock::now();
    nets_.zero_grad();
    auto fw = forward_generator(Phase::adapt, s, &t, state_.step);
    auto total = total_loss(fw.terms, config_.effective_weights());
    ad::backward(total);
    opt_.step(nets_.parameters());
    double d = 0.0;
    if (config_.effective_weights().adv > 0) d = disc_update(fw.x_s, {&fw.x_ss, &fw.x_ts});
    nets_.zero_grad();
    LogRow row = make_row(Phase::adapt, fw.terms, static_cast<double>(total.item()), d);
    ++state_.step;
    emit(row, ms_since(t0));
    return row;
}

template <class T>
LogRow Trainer<T>::step_oracle(const Batch& t) {
    const auto t0 = std::chrono::steady_clock::now();
    nets_.zero_grad();
    auto fw = forward_generator(Phase::oracle, t, nullptr, state_.step);
    auto total = total_loss(fw.terms, config_.effective_weights());
    ad::backward(total);
    opt_.step(nets_.parameters());
    nets_.zero_grad();
    LogRow row = make_row(Phase::oracle, fw.terms, static_cast<double>(total.item()), 0.0);
    ++state_.step;
    emit(row, ms_since(t0));
    return row;
}

template <class T>
void Trainer<T>::maybe_evaluate(const std::vector<Volume>* val, Domain domain) {
    if (!val || val->empty() || state_.epoch % config_.eval_every != 0) return;
    EvalOptions opt;
    opt.num_classes = nets_.config().num_classes;
    const double dice = evaluate(*val, domain, opt).mean_dice().mean;
    state_.evals.push_back({state_.epoch, state_.step, dice});
    if (dice > state_.best_val_dice) {
        state_.best_val_dice = dice;
        state_.best_epoch = state_.epoch;
        state_.evals_since_best = 0;
        if (config_.early_stop) {
            best_snapshot_.clear();
            for (auto* p : nets_.parameters()) best_snapshot_.push_back(p->value());
        }
    } else {
        ++state_.evals_since_best;
        if (config_.early_stop && state_.evals_since_best >= config_.patience) state_.stopped_early = true;
    }
}

template <class T>
void Trainer<T>::finish_phase(bool complete) {
    // A phase interrupted by max_steps keeps its live weights for resumption.
    if (!complete || !config_.early_stop || best_snapshot_.empty()) return;
    auto params = nets_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = best_snapshot_[i];
}

namespace {

int total_slices(const std::vector<Volume>& vols) {
    int n = 0;
    for (const auto& v : vols) n += v.depth();
    return n;
}

bool reached(const TrainConfig& c, const TrainState& s) { return c.max_steps > 0 && s.step >= c.max_steps; }

}  // namespace

template <class T>
void Trainer<T>::train_source(const std::vector<Volume>& source, const std::vector<Volume>* source_val) {
    if (source.empty()) throw ConfigError("train_source: no source volumes");
    begin_phase(Phase::source);
    const AugmentationSpec* spec = config_.augment ? &config_.augmentation : nullptr;
    BatchStream ss(&source, config_.batch_size,
                   derive_seed(config_.seed, {static_cast<std::uint64_t>(Phase::source), kStreamSource}), spec,
                   state_.source_stream);
    const int spe = ss.batches_per_pass();
    while (state_.epoch < config_.source_epochs && !reached(config_, state_)) {
        while (state_.batch_in_epoch < spe && !reached(config_, state_)) {
            step_source(ss.next());
            ++state_.batch_in_epoch;
            state_.source_stream = ss.state();
        }
        if (state_.batch_in_epoch < spe) break;
        ++state_.epoch;
        state_.batch_in_epoch = 0;
        maybe_evaluate(source_val, Domain::source);
        if (on_epoch_) on_epoch_();
    }
}

template <class T>
void Trainer<T>::adapt(const std::vector<Volume>& source, const std::vector<Volume>& target,
                       const std::vector<Volume>* target_val) {
    if (source.empty()) throw ConfigError("adapt: no source volumes");
    if (target.empty()) throw ConfigError("adapt: target set is empty");
    if (total_slices(target) < 3) throw ConfigError("adapt: need at least 3 target slices");
    begin_phase(Phase::adapt);
    if (state_.step == 0 && state_.epoch == 0 && state_.batch_in_epoch == 0 && config_.init_target_from_source) {
        nets_.copy_component(Component::e_s, Component::e_t);
        nets_.copy_component(Component::d_s, Component::d_t);
    }
    const AugmentationSpec* spec = config_.augment ? &config_.augmentation : nullptr;
    const auto ph = static_cast<std::uint64_t>(Phase::adapt);
    BatchStream ss(&source, config_.batch_size, derive_seed(config_.seed, {ph, kStreamSource}), spec,
                   state_.source_stream);
    BatchStream ts(&target, config_.batch_size, derive_seed(config_.seed, {ph, kStreamTarget}), spec,
                   state_.target_stream);
    const int spe = config_.uda_steps_per_epoch > 0 ? config_.uda_steps_per_epoch : ts.batches_per_pass();
    while (state_.epoch < config_.uda_epochs && !state_.stopped_early && !reached(config_, state_)) {
        while (state_.batch_in_epoch < spe && !reached(config_, state_)) {
            Batch s = ss.next();
            Batch t = ts.next();
            step_adapt(s, t);
            ++state_.batch_in_epoch;
            state_.source_stream = ss.state();
            state_.target_stream = ts.state();
        }
        if (state_.batch_in_epoch < spe) break;
        ++state_.epoch;
        state_.batch_in_epoch = 0;
        maybe_evaluate(target_val, Domain::target);
        if (on_epoch_) on_epoch_();
    }
    finish_phase(state_.stopped_early || state_.epoch >= config_.uda_epochs);
}

template <class T>
void Trainer<T>::finetune_oracle(const std::vector<Volume>& target, const std::vector<Volume>* target_val) {
    if (target.empty()) throw ConfigError("finetune_oracle: no labelled target volumes");
    begin_phase(Phase::oracle);
    if (state_.step == 0 && state_.epoch == 0 && state_.batch_in_epoch == 0 && config_.init_target_from_source) {
        nets_.copy_component(Component::e_s, Component::e_t);
        nets_.copy_component(Component::d_s, Component::d_t);
    }
    const AugmentationSpec* spec = config_.augment ? &config_.augmentation : nullptr;
    BatchStream ts(&target, config_.batch_size,
                   derive_seed(config_.seed, {static_cast<std::uint64_t>(Phase::oracle), kStreamTarget}), spec,
                   state_.target_stream);
    const int spe = config_.oracle_steps_per_epoch > 0 ? config_.oracle_steps_per_epoch : ts.batches_per_pass();
    while (state_.epoch < config_.oracle_epochs && !state_.stopped_early && !reached(config_, state_)) {
        while (state_.batch_in_epoch < spe && !reached(config_, state_)) {
            step_oracle(ts.next());
            ++state_.batch_in_epoch;
            state_.target_stream = ts.state();
        }
        if (state_.batch_in_epoch < spe) break;
        ++state_.epoch;
        state_.batch_in_epoch = 0;
        maybe_evaluate(target_val, Domain::target);
        if (on_epoch_) on_epoch_();
    }
    finish_phase(state_.stopped_early || state_.epoch >= config_.oracle_epochs);
}

template <class T>
LabelMap Trainer<T>::infer(const Volume& v, Domain domain) const {
    v.validate();
    const int D = v.depth(), H = v.height(), W = v.width();
    if (H % 4 != 0 || W % 4 != 0) throw ShapeError("infer: slice size must be divisible by 4");
    const int K = nets_.config().num_classes;
    LabelMap out({D, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const ComponentMask none;
    constexpr int chunk = 8;
    for (int z0 = 0; z0 < D; z0 += chunk) {
        const int n = std::min(chunk, D - z0);
        Tensor<T> x({n, 1, H, W});
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * plane; ++i) {
            x[i] = static_cast<T>(v.image[static_cast<std::size_t>(z0) * plane + i]);
        }
        auto post = nets_.encode(ad::constant(std::move(x)), domain, none);
        ad::Var<T> z = post.mu;
        if (config_.test_latent == TestLatent::sample) {
            std::mt19937_64 rng(derive_seed(config_.seed, {hash_string(v.scan_id), static_cast<std::uint64_t>(z0)}));
            z = sample(post, rng);
        }
        const auto& logits = nets_.segment_logits(z, none).value();
        for (int b = 0; b < n; ++b) {
            for (std::size_t i = 0; i < plane; ++i) {
                int best = 0;
                T bv = logits[(static_cast<std::size_t>(b) * K) * plane + i];
                for (int c = 1; c < K; ++c) {
                    const T val = logits[(static_cast<std::size_t>(b) * K + c) * plane + i];
                    if (val > bv) {
                        bv = val;
                        best = c;
                    }
                }
                out[static_cast<std::size_t>(z0 + b) * plane + i] = static_cast<std::uint8_t>(best);
            }
        }
    }
    return out;
}

template <class T>
MetricsReport Trainer<T>::evaluate(const std::vector<Volume>& vols, Domain domain, const EvalOptions& opt) const {
    std::vector<Tensor<std::uint8_t>> preds, gts;
    std::vector<std::string> ids;
    for (const auto& v : vols) {
        preds.push_back(infer(v, domain));
        gts.push_back(v.labels);
        ids.push_back(v.scan_id);
    }
    return evaluate_scans(preds, gts, ids, opt);
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'U', 'D', 'A', 'C', 'K', 'P', 'T', '1'};

class Writer {
public:
    explicit Writer(const fs::path& p) : out_(p, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot write " + p.string());
    }
    template <class U>
    void pod(U v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
    }
    template <class U>
    void vec(const std::vector<U>& v) {
        pod<std::uint64_t>(v.size());
        out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(U)));
    }
    void str(const std::string& s) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void close() {
        out_.close();
        if (!out_) throw IoError("checkpoint write failed");
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const fs::path& p) : in_(p, std::ios::binary), path_(p.string()) {
        if (!in_) throw IoError("cannot open " + path_);
    }
    template <class U>
    U pod() {
        U v{};
        in_.read(reinterpret_cast<char*>(&v), sizeof(U));
        check();
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        std::string s(n, '\0');
        in_.read(s.data(), n);
        check();
        return s;
    }
    // Reads `n` values stored with `bytes` width into T.
    template <class Vec>
    void values(Vec& dst, std::size_t n, int bytes) {
        using T = typename Vec::value_type;
        dst.resize(n);
        if (bytes == static_cast<int>(sizeof(T))) {
            in_.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(n * sizeof(T)));
        } else if (bytes == 4) {
            std::vector<float> tmp(n);
            in_.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
            for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(tmp[i]);
        } else if (bytes == 8) {
            std::vector<double> tmp(n);
            in_.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 8));
            for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(tmp[i]);
        } else {
            throw IoError(path_ + ": unsupported value width");
        }
        check();
    }
    void expect_magic() {
        char m[8];
        in_.read(m, 8);
        check();
        if (std::memcmp(m, kMagic, 8) != 0) throw IoError(path_ + ": not a checkpoint");
    }

private:
    void check() {
        if (!in_) throw IoError(path_ + ": truncated checkpoint");
    }
    std::ifstream in_;
    std::string path_;
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string get(const KeyValues& kv, const std::string& key, const std::string& origin) {
    for (const auto& [k, v] : kv) {
        if (k == key) return v;
    }
    throw ConfigError(origin + ": missing key '" + key + "'");
}

}  // namespace

template <class T>
void Trainer<T>::save_checkpoint(const fs::path& stem) const {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    auto& self = const_cast<Trainer<T>&>(*this);
    const auto params = self.nets_.parameters();

    Writer w(stem.string() + ".bin");
    w.raw(kMagic, 8);
    w.pod<std::uint32_t>(sizeof(T));
    w.pod<std::uint64_t>(params.size());
    for (const auto* p : params) {
        w.str(p->name());
        w.vec(p->value().shape);
        w.raw(p->value().data.data(), p->numel() * sizeof(T));
    }
    const auto& slots = opt_.slots();
    w.pod<std::uint64_t>(slots.size());
    for (const auto& s : slots) {
        w.pod<std::int64_t>(s.t);
        w.pod<std::uint64_t>(s.m.size());
        w.raw(s.m.data(), s.m.size() * sizeof(T));
        w.raw(s.v.data(), s.v.size() * sizeof(T));
    }
    w.pod<std::uint64_t>(best_snapshot_.size());
    for (const auto& t : best_snapshot_) w.raw(t.data.data(), t.data.size() * sizeof(T));
    w.close();

    const auto& nc = nets_.config();
    std::ostringstream m;
    m << "format=uda-checkpoint-1\n"
      << "value_bytes=" << sizeof(T) << "\n"
      << "net.in_channels=" << nc.in_channels << "\nnet.base_channels=" << nc.base_channels
      << "\nnet.latent_channels=" << nc.latent_channels << "\nnet.ez_blocks=" << nc.ez_blocks
      << "\nnet.dz_blocks=" << nc.dz_blocks << "\nnet.seg_channels=" << nc.seg_channels
      << "\nnet.seg_blocks=" << nc.seg_blocks << "\nnet.disc_channels=" << nc.disc_channels
      << "\nnet.disc_downsample=" << nc.disc_downsample << "\nnet.num_classes=" << nc.num_classes
      << "\nnet.leaky_slope=" << fmt_double(nc.leaky_slope) << "\nnet.log_var_min=" << fmt_double(nc.log_var_min)
      << "\nnet.log_var_max=" << fmt_double(nc.log_var_max) << "\n";
    m << "seed=" << config_.seed << "\n"
      << "phase=" << phase_name(state_.phase) << "\nstep=" << state_.step << "\nepoch=" << state_.epoch
      << "\nbatch_in_epoch=" << state_.batch_in_epoch << "\nsource_stream=" << state_.source_stream.pass << ','
      << state_.source_stream.index << "\ntarget_stream=" << state_.target_stream.pass << ','
      << state_.target_stream.index << "\nbest_val_dice=" << fmt_double(state_.best_val_dice)
      << "\nbest_epoch=" << state_.best_epoch << "\nevals_since_best=" << state_.evals_since_best
      << "\nstopped_early=" << (state_.stopped_early ? 1 : 0) << "\n"
      << "rng=stateless; every draw is seeded from (seed, phase, step, purpose)\n";
    for (const auto& e : state_.evals)
        m << "eval=" << e.epoch << ',' << e.step << ',' << fmt_double(e.mean_dice) << "\n";
    for (Component c : kAllComponents) {
        m << "component." << component_name(c) << ".parameters=" << nets_.parameter_count(c) << "\n";
    }
    for (const auto* p : params) m << "shape." << p->name() << "=" << shape_str(p->value().shape) << "\n";
    write_text(stem.string() + ".manifest", m.str());
}

template <class T>
void Trainer<T>::load_checkpoint(const fs::path& stem) {
    const std::string mpath = stem.string() + ".manifest";
    const auto kv = parse_key_values(read_text(mpath), mpath);
    auto params = nets_.parameters();

    Reader r(stem.string() + ".bin");
    r.expect_magic();
    const int bytes = static_cast<int>(r.pod<std::uint32_t>());
    const auto n = r.pod<std::uint64_t>();
    if (n != params.size()) throw IoError(stem.string() + ": parameter count mismatch");
    for (auto* p : params) {
        const auto name = r.str();
        if (name != p->name()) throw IoError(stem.string() + ": expected parameter " + p->name() + ", found " + name);
        const auto rank = r.pod<std::uint64_t>();
        Shape shape(rank);
        for (auto& d : shape) d = r.pod<int>();
        require_same_shape(shape, p->value().shape, ("checkpoint " + name).c_str());
        r.values(p->value().data, p->numel(), bytes);
    }
    auto& slots = opt_.slots();
    const auto ns = r.pod<std::uint64_t>();
    slots.assign(ns, AdamSlot<T>{});
    for (auto& s : slots) {
        s.t = r.pod<std::int64_t>();
        const auto sz = r.pod<std::uint64_t>();
        r.values(s.m, sz, bytes);
        r.values(s.v, sz, bytes);
    }
    const auto nb = r.pod<std::uint64_t>();
    best_snapshot_.clear();
    if (nb != 0 && nb != params.size()) throw IoError(stem.string() + ": snapshot size mismatch");
    for (std::size_t i = 0; i < nb; ++i) {
        Tensor<T> t(params[i]->value().shape);
        r.values(t.data, t.numel(), bytes);
        best_snapshot_.push_back(std::move(t));
    }

    TrainState s;
    const auto ph = get(kv, "phase", mpath);
    s.phase = ph == "source" ? Phase::source : ph == "adapt" ? Phase::adapt : Phase::oracle;
    s.step = std::stoll(get(kv, "step", mpath));
    s.epoch = std::stoi(get(kv, "epoch", mpath));
    s.batch_in_epoch = std::stoi(get(kv, "batch_in_epoch", mpath));
    auto stream = [&](const std::string& key) {
        const auto v = get(kv, key, mpath);
        const auto comma = v.find(',');
        return StreamState{std::stoi(v.substr(0, comma)), std::stoi(v.substr(comma + 1))};
    };
    s.source_stream = stream("source_stream");
    s.target_stream = stream("target_stream");
    s.best_val_dice = std::stod(get(kv, "best_val_dice", mpath));
    s.best_epoch = std::stoi(get(kv, "best_epoch", mpath));
    s.evals_since_best = std::stoi(get(kv, "evals_since_best", mpath));
    s.stopped_early = get(kv, "stopped_early", mpath) == "1";
    for (const auto& [k, v] : kv) {
        if (k != "eval") continue;
        EvalRecord e;
        std::istringstream is(v);
        char c1, c2;
        is >> e.epoch >> c1 >> e.step >> c2 >> e.mean_dice;
        s.evals.push_back(e);
    }
    state_ = std::move(s);
}

CheckpointInfo read_checkpoint_info(const fs::path& stem) {
    const std::string mpath = stem.string() + ".manifest";
    if (!fs::exists(mpath)) throw ConfigError("no checkpoint at " + stem.string());
    const auto kv = parse_key_values(read_text(mpath), mpath);
    CheckpointInfo info;
    auto& n = info.net;
    n.in_channels = std::stoi(get(kv, "net.in_channels", mpath));
    n.base_channels = std::stoi(get(kv, "net.base_channels", mpath));
    n.latent_channels = std::stoi(get(kv, "net.latent_channels", mpath));
    n.ez_blocks = std::stoi(get(kv, "net.ez_blocks", mpath));
    n.dz_blocks = std::stoi(get(kv, "net.dz_blocks", mpath));
    n.seg_channels = std::stoi(get(kv, "net.seg_channels", mpath));
    n.seg_blocks = std::stoi(get(kv, "net.seg_blocks", mpath));
    n.disc_channels = std::stoi(get(kv, "net.disc_channels", mpath));
    // Absent in manifests written before the key existed; those all used 3.
    if (const auto it =
            std::find_if(kv.begin(), kv.end(), [](const auto& e) { return e.first == "net.disc_downsample"; });
        it != kv.end()) {
        n.disc_downsample = std::stoi(it->second);
    }
    n.num_classes = std::stoi(get(kv, "net.num_classes", mpath));
    n.leaky_slope = std::stod(get(kv, "net.leaky_slope", mpath));
    n.log_var_min = std::stod(get(kv, "net.log_var_min", mpath));
    n.log_var_max = std::stod(get(kv, "net.log_var_max", mpath));
    info.init_seed = std::stoull(get(kv, "seed", mpath));
    info.value_bytes = std::stoi(get(kv, "value_bytes", mpath));
    return info;
}

int LogTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (columns[i] == name) return static_cast<int>(i);
    }
    return -1;
}

LogTable parse_log_csv(const std::string& text) {
    LogTable t;
    std::istringstream is(text);
    std::string line;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream ls(s);
        while (std::getline(ls, cur, ',')) out.push_back(cur);
        if (!s.empty() && s.back() == ',') out.emplace_back();
        return out;
    };
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (t.columns.empty()) {
            t.columns = split(line);
            continue;
        }
        const auto cells = split(line);
        if (cells.size() != t.columns.size()) {
            throw ValidationError("log CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                                  std::to_string(t.columns.size()));
        }
        std::vector<double> row;
        for (const auto& c : cells) {
            char* end = nullptr;
            const double v = std::strtod(c.c_str(), &end);
            row.push_back(end && *end == '\0' && !c.empty() ? v : std::nan(""));
        }
        t.rows.push_back(std::move(row));
    }
    if (t.columns.empty() || t.rows.empty()) throw ValidationError("log CSV has no data rows");
    return t;
}

Volume few_shot_slices(const Volume& v, int count) {
    if (v.depth() < count) throw ConfigError("few-shot: volume has fewer than " + std::to_string(count) + " slices");
    const std::size_t plane = static_cast<std::size_t>(v.height()) * v.width();
    auto classes_on = [&](int z) {
        std::array<bool, 256> seen{};
        for (std::size_t i = 0; i < plane; ++i) seen[v.labels[static_cast<std::size_t>(z) * plane + i]] = true;
        int n = 0;
        for (int c = 1; c < 256; ++c) n += seen[static_cast<std::size_t>(c)];
        return n;
    };
    const int mid = (v.depth() - count) / 2;
    // Search outward from the middle of the stack.
    for (int off = 0; off <= v.depth(); ++off) {
        for (int start : {mid - off, mid + off}) {
            if (start < 0 || start + count > v.depth()) continue;
            bool ok = true;
            for (int z = start; z < start + count; ++z) ok = ok && classes_on(z) >= 3;
            if (ok) return v.sub_volume(start, count);
        }
    }
    throw ConfigError("few-shot: no run of " + std::to_string(count) + " slices shows three foreground classes");
}

double coefficient_of_variation(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double m = 0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double ss = 0;
    for (double x : xs) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size()));
    return m != 0 ? sd / std::abs(m) : std::numeric_limits<double>::quiet_NaN();
}

template class Adam<float>;
template class Adam<double>;
template class Trainer<float>;
template class Trainer<double>;
template ComponentMask grad_support<float>(NetworkSet<float>&);
template ComponentMask grad_support<double>(NetworkSet<double>&);

}  // namespace uda
