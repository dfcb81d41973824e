#include "uda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace uda {

void LossWeights::validate() const {
    for (double v : {rec, kl, seg, adv, cyc}) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
    }
}

ClassWeights::ClassWeights(std::vector<double> raw) : w(std::move(raw)) {
    if (w.empty()) throw ConfigError("class weights: empty");
    for (double v : w) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("class weights must be finite and >= 0");
    }
    const double m = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
    if (m <= 0.0) throw ConfigError("class weights: all zero");
    for (double& v : w) v /= m;
}

ClassWeights ClassWeights::defaults(int num_classes) {
    std::vector<double> raw(static_cast<std::size_t>(num_classes), 1.0);
    raw[0] = 0.2;
    return ClassWeights(std::move(raw));
}

ClassWeights ClassWeights::uniform(int num_classes) {
    return ClassWeights(std::vector<double>(static_cast<std::size_t>(num_classes), 1.0));
}

void validate_labels(const LabelMap& y, int num_classes) {
    for (auto v : y.data) {
        if (static_cast<int>(v) >= num_classes) {
            throw ValidationError("label " + std::to_string(static_cast<int>(v)) + " out of range for " +
                                  std::to_string(num_classes) + " classes");
        }
    }
}

namespace {

void check_probs_labels(const Shape& probs, const LabelMap& y, const char* what) {
    if (probs.size() != 4 || y.rank() != 3 || probs[0] != y.dim(0) || probs[2] != y.dim(1) || probs[3] != y.dim(2)) {
        throw ShapeError(std::string(what) + ": probabilities " + shape_str(probs) + " vs labels " +
                         shape_str(y.shape));
    }
}

template <class T>
void check_scores(const ad::Var<T>& s, const char* what) {
    for (T v : s.value().data) {
        if (!(v > T(0) && v < T(1))) {
            throw ValidationError(std::string(what) + ": discriminator score " +
                                  std::to_string(static_cast<double>(v)) + " outside (0,1)");
        }
    }
}

}  // namespace

template <class T>
ad::Var<T> recon_loss(const ad::Var<T>& x_hat, const ad::Var<T>& x) {
    require_same_shape(x_hat.shape(), x.shape(), "recon_loss");
    return ad::mean(ad::abs(ad::sub(x_hat, x)));
}

template <class T>
ad::Var<T> kl_loss(const LatentPosterior<T>& post, KlReduction reduction) {
    require_same_shape(post.mu.shape(), post.log_var.shape(), "kl_loss");
    // 0.5 * (mu^2 + exp(lv) - lv - 1)
    auto inner = ad::add_scalar(ad::sub(ad::add(ad::square(post.mu), ad::exp(post.log_var)), post.log_var), T(-1));
    const auto n = static_cast<T>(post.mu.dim(0));
    const T scale = reduction == KlReduction::sum ? T(0.5) / n : T(0.5) / static_cast<T>(post.mu.numel());
    return ad::mul_scalar(ad::sum(inner), scale);
}

template <class T>
ad::Var<T> soft_dice(const ad::Var<T>& probs, const LabelMap& y) {
    check_probs_labels(probs.shape(), y, "soft_dice");
    const int n = probs.dim(0), k = probs.dim(1);
    validate_labels(y, k);
    const std::size_t plane = static_cast<std::size_t>(probs.dim(2)) * probs.dim(3);
    std::vector<T> inter(static_cast<std::size_t>(k), T(0)), psum(inter), gsum(inter);
    const auto& p = probs.value();
    for (int b = 0; b < n; ++b) {
        for (int c = 0; c < k; ++c) {
            const T* pc = p.ptr() + (static_cast<std::size_t>(b) * k + c) * plane;
            const std::uint8_t* yb = y.ptr() + static_cast<std::size_t>(b) * plane;
            T pi = T(0), ps = T(0), gs = T(0);
            for (std::size_t i = 0; i < plane; ++i) {
                const bool g = yb[i] == c;
                ps += pc[i];
                if (g) {
                    pi += pc[i];
                    gs += T(1);
                }
            }
            inter[static_cast<std::size_t>(c)] += pi;
            psum[static_cast<std::size_t>(c)] += ps;
            gsum[static_cast<std::size_t>(c)] += gs;
        }
    }
    const T eps = static_cast<T>(kDiceSmooth);
    Tensor<T> out({k});
    for (int c = 0; c < k; ++c) {
        const auto i = static_cast<std::size_t>(c);
        out[i] = (T(2) * inter[i] + eps) / (psum[i] + gsum[i] + eps);
    }
    return ad::make_result<T>(std::move(out), {probs}, [y, n, k, plane, inter, psum, gsum, eps](ad::Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (int c = 0; c < k; ++c) {
            const auto i = static_cast<std::size_t>(c);
            const T den = psum[i] + gsum[i] + eps;
            const T num = T(2) * inter[i] + eps;
            const T d_fg = self.grad[i] * (T(2) * den - num) / (den * den);
            const T d_bg = self.grad[i] * (-num) / (den * den);
            for (int b = 0; b < n; ++b) {
                T* gc = g.data() + (static_cast<std::size_t>(b) * k + c) * plane;
                const std::uint8_t* yb = y.ptr() + static_cast<std::size_t>(b) * plane;
                for (std::size_t j = 0; j < plane; ++j) gc[j] += yb[j] == c ? d_fg : d_bg;
            }
        }
    });
}

template <class T>
ad::Var<T> weighted_cross_entropy(const ad::Var<T>& probs, const LabelMap& y, const ClassWeights& w) {
    check_probs_labels(probs.shape(), y, "weighted_cross_entropy");
    const int n = probs.dim(0), k = probs.dim(1);
    if (w.size() != k) throw ShapeError("weighted_cross_entropy: class weight count != class count");
    validate_labels(y, k);
    const std::size_t plane = static_cast<std::size_t>(probs.dim(2)) * probs.dim(3);
    const T count = static_cast<T>(static_cast<std::size_t>(n) * plane);
    const T floor = std::numeric_limits<T>::min();
    const auto& p = probs.value();
    T acc = T(0);
    for (int b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < plane; ++i) {
            const int c = y[static_cast<std::size_t>(b) * plane + i];
            const T pv = p[(static_cast<std::size_t>(b) * k + c) * plane + i];
            acc -= static_cast<T>(w.w[static_cast<std::size_t>(c)]) * std::log(std::max(pv, floor));
        }
    }
    std::vector<T> cw(w.w.begin(), w.w.end());
    return ad::make_result<T>(Tensor<T>({1}, acc / count), {probs},
                              [y, n, k, plane, count, floor, cw](ad::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  auto& g = in.ensure_grad();
                                  const T d = self.grad[0] / count;
                                  for (int b = 0; b < n; ++b) {
                                      for (std::size_t i = 0; i < plane; ++i) {
                                          const int c = y[static_cast<std::size_t>(b) * plane + i];
                                          const std::size_t idx = (static_cast<std::size_t>(b) * k + c) * plane + i;
                                          const T pv = in.value[idx];
                                          if (pv > floor) g[idx] -= d * cw[static_cast<std::size_t>(c)] / pv;
                                      }
                                  }
                              });
}

template <class T>
ad::Var<T> seg_loss(const ad::Var<T>& probs, const LabelMap& y, const ClassWeights& w) {
    const int k = probs.value().rank() == 4 ? probs.dim(1) : 0;
    if (k < 2) throw ShapeError("seg_loss: need at least two classes");
    auto dice = soft_dice(probs, y);
    std::vector<T> fg(static_cast<std::size_t>(k), T(1) / static_cast<T>(k - 1));
    fg[0] = T(0);
    auto mean_fg = ad::sum(ad::mul(dice, ad::constant(Tensor<T>({k}, fg))));
    auto dice_term = ad::add_scalar(ad::mul_scalar(mean_fg, T(-1)), T(1));
    return ad::add(dice_term, weighted_cross_entropy(probs, y, w));
}

template <class T>
ad::Var<T> task_consistency_loss(const ad::Var<T>& probs_st, const LabelMap& y_s, const ClassWeights& w) {
    return seg_loss(probs_st, y_s, w);
}

template <class T>
ad::Var<T> adv_loss_disc(const ad::Var<T>& scores_real, const ad::Var<T>& scores_fake) {
    check_scores(scores_real, "adv_loss_disc");
    check_scores(scores_fake, "adv_loss_disc");
    auto real_term = ad::mean(ad::log(scores_real));
    auto fake_term = ad::mean(ad::log(ad::add_scalar(ad::mul_scalar(scores_fake, T(-1)), T(1))));
    return ad::mul_scalar(ad::add(real_term, fake_term), T(-1));
}

template <class T>
ad::Var<T> adv_loss_gen(const ad::Var<T>& scores_fake, GanMode mode) {
    check_scores(scores_fake, "adv_loss_gen");
    if (mode == GanMode::non_saturating) return ad::mul_scalar(ad::mean(ad::log(scores_fake)), T(-1));
    return ad::mean(ad::log(ad::add_scalar(ad::mul_scalar(scores_fake, T(-1)), T(1))));
}

template <class T>
ad::Var<T> cycle_loss(const ad::Var<T>& x_back, const ad::Var<T>& x_t) {
    require_same_shape(x_back.shape(), x_t.shape(), "cycle_loss");
    return ad::mean(ad::abs(ad::sub(x_back, x_t)));
}

std::vector<std::string> loss_term_names() {
    return {"rec_s", "rec_t", "kl_s", "kl_t", "seg", "task", "adv_s", "adv_t", "cyc"};
}

template <class T>
std::vector<double> term_values(const LossTerms<T>& t) {
    std::vector<double> out;
    for (const auto* v : {&t.rec_s, &t.rec_t, &t.kl_s, &t.kl_t, &t.seg, &t.task, &t.adv_s, &t.adv_t, &t.cyc}) {
        out.push_back(v->defined() ? static_cast<double>(v->item()) : 0.0);
    }
    return out;
}

template <class T>
ad::Var<T> total_loss(const LossTerms<T>& t, const LossWeights& w) {
    w.validate();
    const std::vector<std::pair<const ad::Var<T>*, double>> parts{
        {&t.rec_s, w.rec}, {&t.rec_t, w.rec}, {&t.kl_s, w.kl},   {&t.kl_t, w.kl}, {&t.seg, w.seg},
        {&t.task, w.seg},  {&t.adv_s, w.adv}, {&t.adv_t, w.adv}, {&t.cyc, w.cyc}};
    const auto names = loss_term_names();
    std::vector<ad::Var<T>> terms;
    std::vector<T> weights;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& v = *parts[i].first;
        if (!v.defined()) continue;
        if (!std::isfinite(static_cast<double>(v.item()))) {
            throw NumericalError("non-finite loss term '" + names[i] + "' = " + std::to_string(v.item()));
        }
        terms.push_back(v);
        weights.push_back(static_cast<T>(parts[i].second));
    }
    if (terms.empty()) return ad::constant(Tensor<T>({1}));
    return ad::weighted_sum(terms, weights);
}

#define UDA_INSTANTIATE_LOSSES(T)                                                                           \
    template ad::Var<T> recon_loss<T>(const ad::Var<T>&, const ad::Var<T>&);                                \
    template ad::Var<T> kl_loss<T>(const LatentPosterior<T>&, KlReduction);                                 \
    template ad::Var<T> soft_dice<T>(const ad::Var<T>&, const LabelMap&);                                   \
    template ad::Var<T> weighted_cross_entropy<T>(const ad::Var<T>&, const LabelMap&, const ClassWeights&); \
    template ad::Var<T> seg_loss<T>(const ad::Var<T>&, const LabelMap&, const ClassWeights&);               \
    template ad::Var<T> task_consistency_loss<T>(const ad::Var<T>&, const LabelMap&, const ClassWeights&);  \
    template ad::Var<T> adv_loss_disc<T>(const ad::Var<T>&, const ad::Var<T>&);                             \
    template ad::Var<T> adv_loss_gen<T>(const ad::Var<T>&, GanMode);                                        \
    template ad::Var<T> cycle_loss<T>(const ad::Var<T>&, const ad::Var<T>&);                                \
    template std::vector<double> term_values<T>(const LossTerms<T>&);                                       \
    template ad::Var<T> total_loss<T>(const LossTerms<T>&, const LossWeights&);

UDA_INSTANTIATE_LOSSES(float)
UDA_INSTANTIATE_LOSSES(double)

}  // namespace uda
