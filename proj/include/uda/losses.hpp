#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uda/autodiff.hpp"
#include "uda/nets.hpp"

namespace uda {

// (N, H, W) class indices.
using LabelMap = Tensor<std::uint8_t>;

struct LossWeights {
    double rec = 1.0;
    double kl = 0.1;
    double seg = 1.0;
    double adv = 1.0;
    double cyc = 10.0;

    void validate() const;
};

// Weights for the cross-entropy term, normalized to mean 1.
struct ClassWeights {
    std::vector<double> w;

    ClassWeights() = default;
    explicit ClassWeights(std::vector<double> raw);
    // Background 0.2, foreground 1.0, then normalized.
    static ClassWeights defaults(int num_classes);
    static ClassWeights uniform(int num_classes);
    [[nodiscard]] int size() const { return static_cast<int>(w.size()); }
};

enum class KlReduction { sum, mean };
enum class GanMode { non_saturating, minimax };

inline constexpr double kDiceSmooth = 1e-5;

// Mean absolute error over all elements.
template <class T>
ad::Var<T> recon_loss(const ad::Var<T>& x_hat, const ad::Var<T>& x);

// KL(q || N(0, I)) for a diagonal Gaussian. `sum` reduction sums over latent
// elements and averages over the batch; `mean` averages over everything.
template <class T>
ad::Var<T> kl_loss(const LatentPosterior<T>& post, KlReduction reduction = KlReduction::sum);

// Per-class soft Dice over the whole batch, shape (K).
template <class T>
ad::Var<T> soft_dice(const ad::Var<T>& probs, const LabelMap& y);

// Mean over pixels of w[y] * -log p[y].
template <class T>
ad::Var<T> weighted_cross_entropy(const ad::Var<T>& probs, const LabelMap& y, const ClassWeights& w);

// (1 - mean foreground soft Dice) + weighted CE.
template <class T>
ad::Var<T> seg_loss(const ad::Var<T>& probs, const LabelMap& y, const ClassWeights& w);

// Segmenter loss on latents of source images translated to the target domain;
// same form as seg_loss.
template <class T>
ad::Var<T> task_consistency_loss(const ad::Var<T>& probs_st, const LabelMap& y_s, const ClassWeights& w);

// -(E[log D(real)] + E[log(1 - D(fake))]).
template <class T>
ad::Var<T> adv_loss_disc(const ad::Var<T>& scores_real, const ad::Var<T>& scores_fake);

// non_saturating: -E[log D(fake)]; minimax: E[log(1 - D(fake))].
template <class T>
ad::Var<T> adv_loss_gen(const ad::Var<T>& scores_fake, GanMode mode = GanMode::non_saturating);

// L1 between the target image and its T -> S -> T reconstruction.
template <class T>
ad::Var<T> cycle_loss(const ad::Var<T>& x_back, const ad::Var<T>& x_t);

// Generator-side terms of the full objective. Undefined Vars count as zero.
template <class T>
struct LossTerms {
    ad::Var<T> rec_s, rec_t;
    ad::Var<T> kl_s, kl_t;
    ad::Var<T> seg, task;
    ad::Var<T> adv_s, adv_t;
    ad::Var<T> cyc;
};

// Names in the order used by logs and diagnostics.
std::vector<std::string> loss_term_names();

template <class T>
std::vector<double> term_values(const LossTerms<T>& terms);

// lambda_rec (rec_s + rec_t) + lambda_kl (kl_s + kl_t) + lambda_seg (seg + task)
//   + lambda_adv (adv_s + adv_t) + lambda_cyc cyc.
// Throws NumericalError naming the first non-finite term.
template <class T>
ad::Var<T> total_loss(const LossTerms<T>& terms, const LossWeights& weights);

void validate_labels(const LabelMap& y, int num_classes);

}  // namespace uda
