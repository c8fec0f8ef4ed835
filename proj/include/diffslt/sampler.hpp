#pragma once

// Inference: DDPM and DDIM samplers from pure noise over a strided
// timestep grid, classifier-free guidance combination, and MBR / oracle
// candidate selection. Samplers take the denoise step as a callable so the
// toy-model distributional oracles can drive them without a network.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/diffusion.hpp"
#include "diffslt/metrics.hpp"
#include "diffslt/rng.hpp"
#include "diffslt/tensor.hpp"

namespace diffslt {

// w * cond + (1 - w) * uncond, exactly.
template <typename S>
inline TensorT<S> cfg_combine(const TensorT<S>& cond, const TensorT<S>& uncond, double w) {
    if (cond.shape() != uncond.shape())
        shape_error("cfg_combine", "shape mismatch " + shape_str(cond.shape()) + " vs " + shape_str(uncond.shape()));
    TensorT<S> out = TensorT<S>::zeros(cond.shape());
    const S ws = static_cast<S>(w);
    const S wu = static_cast<S>(1.0 - w);
    const S* pc = cond.data().data();
    const S* pu = uncond.data().data();
    S* po = out.data().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = ws * pc[i] + wu * pu[i];
    return out;
}

// x0-prediction denoise callable: (z_t, self_cond, t) -> z0_hat.
template <typename S>
using DenoiseFn = std::function<TensorT<S>(const TensorT<S>&, const TensorT<S>&, int)>;

// Uniformly strided timestep grid T = tau_0 > tau_1 > ... > tau_steps = 0.
inline std::vector<int> sample_time_grid(int total_steps, int steps) {
    if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
    if (steps > total_steps)
        throw std::invalid_argument("sampler: steps " + std::to_string(steps) + " exceed the trained discretization " +
                                    std::to_string(total_steps));
    std::vector<int> grid(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i)
        grid[static_cast<std::size_t>(i)] = static_cast<int>(
            std::llround(static_cast<double>(total_steps) * (steps - i) / static_cast<double>(steps)));
    return grid;
}

// Optional per-step trace of predicted latents (trajectory export).
template <typename S>
struct SampleTrace {
    std::vector<int> timesteps;          // grid values, length steps + 1
    std::vector<std::vector<S>> states;  // z at each grid point, starting at z_T
};

// DDIM with stochasticity eta, self-conditioning chained across steps from
// the previous prediction. Starts at z_T ~ N(0, I) and returns the final
// clean-latent prediction.
template <typename S>
inline TensorT<S> ddim_sample(const DenoiseFn<S>& denoise, const NoiseSchedule& sched, const Shape& latent_shape,
                              int steps, double eta, const TensorT<S>& init_self_cond, Rng& rng,
                              SampleTrace<S>* trace = nullptr) {
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("sampler: eta must be in [0,1]");
    NoGradGuard ng;
    const auto grid = sample_time_grid(sched.total_steps, steps);
    TensorT<S> z = TensorT<S>::randn(latent_shape, rng);
    TensorT<S> self_cond = init_self_cond;
    if (trace) {
        trace->timesteps = grid;
        trace->states.clear();
        trace->states.push_back(z.data());
    }
    for (int k = 0; k < steps; ++k) {
        const int t_cur = grid[static_cast<std::size_t>(k)];
        const int t_prev = grid[static_cast<std::size_t>(k) + 1];
        const double ab_cur = sched.alpha_bar[static_cast<std::size_t>(t_cur)];
        const double ab_prev = sched.alpha_bar[static_cast<std::size_t>(t_prev)];
        TensorT<S> x0 = denoise(z, self_cond, t_cur);

        const double sigma =
            eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) * std::sqrt(1.0 - ab_cur / ab_prev);
        const double dir = std::sqrt(std::max(1.0 - ab_prev - sigma * sigma, 0.0));
        const double c_x0 = std::sqrt(ab_prev);
        const double eps_num = 1.0 / std::sqrt(1.0 - ab_cur);
        const double eps_sub = std::sqrt(ab_cur) / std::sqrt(1.0 - ab_cur);

        TensorT<S> next = TensorT<S>::zeros(latent_shape);
        S* pn = next.data().data();
        const S* pz = z.data().data();
        const S* px = x0.data().data();
        for (std::size_t i = 0; i < next.numel(); ++i) {
            const double eps_hat = eps_num * static_cast<double>(pz[i]) - eps_sub * static_cast<double>(px[i]);
            double v = c_x0 * static_cast<double>(px[i]) + dir * eps_hat;
            if (sigma > 0.0) v += sigma * rng.normal();
            pn[i] = static_cast<S>(v);
        }
        z = next;
        self_cond = x0;
        if (trace) trace->states.push_back(z.data());
    }
    return z;
}

// Ancestral sampling over the same strided grid; the final transition to
// t = 0 is deterministic.
template <typename S>
inline TensorT<S> ddpm_sample(const DenoiseFn<S>& denoise, const NoiseSchedule& sched, const Shape& latent_shape,
                              int steps, const TensorT<S>& init_self_cond, Rng& rng,
                              SampleTrace<S>* trace = nullptr) {
    NoGradGuard ng;
    const auto grid = sample_time_grid(sched.total_steps, steps);
    TensorT<S> z = TensorT<S>::randn(latent_shape, rng);
    TensorT<S> self_cond = init_self_cond;
    if (trace) {
        trace->timesteps = grid;
        trace->states.clear();
        trace->states.push_back(z.data());
    }
    for (int k = 0; k < steps; ++k) {
        const int t_cur = grid[static_cast<std::size_t>(k)];
        const int t_prev = grid[static_cast<std::size_t>(k) + 1];
        const double ab_cur = sched.alpha_bar[static_cast<std::size_t>(t_cur)];
        const double ab_prev = sched.alpha_bar[static_cast<std::size_t>(t_prev)];
        const double alpha_eff = ab_cur / ab_prev;
        const double beta_eff = 1.0 - alpha_eff;
        TensorT<S> x0 = denoise(z, self_cond, t_cur);

        const double c_x0 = std::sqrt(ab_prev) * beta_eff / (1.0 - ab_cur);
        const double c_z = std::sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_cur);
        const double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_cur);
        const double std_dev = (t_prev > 0) ? std::sqrt(var) : 0.0;

        TensorT<S> next = TensorT<S>::zeros(latent_shape);
        S* pn = next.data().data();
        const S* pz = z.data().data();
        const S* px = x0.data().data();
        for (std::size_t i = 0; i < next.numel(); ++i) {
            double v = c_x0 * static_cast<double>(px[i]) + c_z * static_cast<double>(pz[i]);
            if (std_dev > 0.0) v += std_dev * rng.normal();
            pn[i] = static_cast<S>(v);
        }
        z = next;
        self_cond = x0;
        if (trace) trace->states.push_back(z.data());
    }
    return z;
}

struct CandidateSet {
    int source_id = 0;
    std::vector<TokenSeq> candidates;
    std::vector<std::vector<double>> latents;  // final latent per candidate
    int mbr_pick = 0;
    int oracle_pick = -1;
    std::uint64_t seed_base = 0;
};

// MBR under negative-BLEU-4 risk: argmin_y sum_yt (1/|Y|) * (-BLEU4(y, yt))
// over all yt including y itself; ties break to the lowest index.
inline int mbr_select(const CandidateSet& cands) {
    if (cands.candidates.empty()) throw std::invalid_argument("mbr_select: empty candidate set");
    const std::size_t n = cands.candidates.size();
    int best = 0;
    double best_risk = 0.0;
    for (std::size_t y = 0; y < n; ++y) {
        double risk = 0.0;
        for (std::size_t other = 0; other < n; ++other)
            risk += -bleu_n(cands.candidates[y], cands.candidates[other], 4);
        risk /= static_cast<double>(n);
        if (y == 0 || risk < best_risk) {
            best_risk = risk;
            best = static_cast<int>(y);
        }
    }
    return best;
}

// Evaluation-only upper bound: argmax BLEU4(candidate, reference).
inline int oracle_select(const CandidateSet& cands, const TokenSeq& reference) {
    if (cands.candidates.empty()) throw std::invalid_argument("oracle_select: empty candidate set");
    int best = 0;
    double best_score = -1.0;
    for (std::size_t y = 0; y < cands.candidates.size(); ++y) {
        const double score = bleu_n(cands.candidates[y], reference, 4);
        if (score > best_score) {
            best_score = score;
            best = static_cast<int>(y);
        }
    }
    return best;
}

}  // namespace diffslt
