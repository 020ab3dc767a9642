#ifndef GLYPHDIFF_SAMPLER_HPP
#define GLYPHDIFF_SAMPLER_HPP

#include <vector>

#include "glyphdiff/denoiser.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff::sampler {

// Descending noise levels sigma_max = s_0 > ... > s_{T-1} = sigma_min plus a
// terminal zero; `steps` counts the nonzero entries. The construction
// parameters are kept so derived schedules (the quick candidate search) can
// reuse them.
struct NoiseSchedule {
    std::vector<Scalar> sigmas;
    int steps = 0;
    Scalar sigma_min = 0.02;
    Scalar sigma_max = 80.0;
    Scalar rho = 7.0;
};

// Power-law interpolation between sigma_max and sigma_min over T points.
// Throws std::invalid_argument for T < 1 or 0 < sigma_min < sigma_max
// violations.
NoiseSchedule ode_schedule(int T, Scalar sigma_min = 0.02, Scalar sigma_max = 80.0,
                           Scalar rho = 7.0);

// One probability-flow Euler step: z + (sigma_next - sigma_cur) * d with
// d = (z - denoised) / sigma_cur. Throws when sigma_cur is not positive,
// sigma_next is negative, or shapes differ.
Tensor euler_step(const Tensor& z, const Tensor& denoised, Scalar sigma_cur, Scalar sigma_next);

struct RefinementConfig {
    int candidates = 4;       // initial noises scored by the quick search
    Scalar alpha0 = 0.1;      // latent step size, alpha_t = alpha0 * sigma_t
    int quick_steps = 2;      // schedule length of the candidate search
    Scalar cfg_scale = 5.0;   // guidance strength
    int refine_cutoff = 0;    // skip refinement for the last k steps
};

// Everything one sampling run needs besides the denoiser weights. `cond` and
// `uncond` are precomputed text-token embeddings; `mask` selects the region
// to be rewritten; `word_length` is the number of real characters.
struct SampleInputs {
    Tensor image;   // [3,S,S]
    Tensor mask;    // [S,S] binary, non-empty
    Tensor cond;    // [L,d_cond]
    Tensor uncond;  // [L,d_cond]
    int word_length = 0;
};

std::vector<Tensor> draw_candidates(Rng& rng, int n, int image_size, Scalar sigma_max);

// Index of the smallest loss; first wins ties. Throws on an empty list.
int argmin_index(const std::vector<Scalar>& losses);

struct SelectionResult {
    Tensor noise;  // [1,3,S,S]
    int index = 0;
    std::vector<Scalar> scores;  // empty when only one candidate was drawn
};

// Draws N candidates from Normal(0, sigma_max^2 I), runs each through the
// short schedule, and keeps the one whose conditional attention concentrates
// best inside the mask. A single candidate skips the search entirely.
SelectionResult select_initial_noise(denoiser::UNet& net, const SampleInputs& in,
                                     const NoiseSchedule& sched, const RefinementConfig& cfg,
                                     Rng& rng);

struct StepTrace {
    Scalar sigma = 0;
    Scalar aae_before = 0;  // attention objective at the step's incoming latent
    Scalar aae_after = 0;   // same objective at the latent used for the Euler move
};

struct SampleResult {
    Tensor image;  // [3,S,S], input outside the mask, synthesis inside
    std::vector<StepTrace> trace;
    std::vector<Tensor> final_maps;  // conditional attention at the last step
    std::vector<Scalar> candidate_scores;
    int chosen_candidate = 0;
};

// Guided inpainting with per-step latent refinement: each step takes the
// attention-concentration gradient at z_t, moves the latent against it, then
// Euler-steps using a fresh guided denoising of the refined latent. With
// alpha0 = 0 and one candidate this reduces exactly to plain guided Euler
// sampling. Throws std::invalid_argument on bad inputs and
// std::runtime_error (naming the step) when the refinement gradient or the
// final image goes non-finite.
SampleResult sample(denoiser::UNet& net, const SampleInputs& in, const NoiseSchedule& sched,
                    const RefinementConfig& cfg, Rng& rng);

}  // namespace glyphdiff::sampler

#endif  // GLYPHDIFF_SAMPLER_HPP
