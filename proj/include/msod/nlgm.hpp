#pragma once

#include <array>
#include <vector>

#include "msod/rng.hpp"
#include "msod/tensor.hpp"

namespace msod::nn {

// Which index of the similarity logits gets normalized. kKey reproduces the
// standard convention (each query row sums to 1); kQuery is the alternative
// kept around for A/B experiments.
enum class SoftmaxAxis { kKey, kQuery };

enum class NonLocalMode { kBoth, kSpatialOnly, kChannelOnly };

struct DsnlbParams {
  Tensor w_query, b_query;  // 1x1 conv C -> C
  Tensor w_key, b_key;
  Tensor w_value, b_value;
  Tensor w_out, b_out;      // aggregation 1x1 conv C -> C
};

struct NlgmParams {
  // blocks[4] consumes the module input; blocks[i] consumes blocks[i+1]'s
  // output and emits the stage-(i+1) feature.
  std::vector<DsnlbParams> blocks;
};

DsnlbParams make_dsnlb_params(int channels, Rng& rng);
NlgmParams make_nlgm_params(int channels, Rng& rng, int blocks = 5);

// Similarity over the K = H*W spatial positions, row-stochastic under kKey.
Tensor spatial_similarity(const Tensor& a, const DsnlbParams& p,
                          SoftmaxAxis axis = SoftmaxAxis::kKey);
// Attention branch without the residual: reshape(D * S^T).
Tensor spatial_attention_branch(const Tensor& a, const DsnlbParams& p,
                                SoftmaxAxis axis = SoftmaxAxis::kKey);
Tensor spatial_nonlocal(const Tensor& a, const DsnlbParams& p,
                        SoftmaxAxis axis = SoftmaxAxis::kKey);

// Channel-space similarity of the raw feature map (no learned projections).
Tensor channel_similarity(const Tensor& a, SoftmaxAxis axis = SoftmaxAxis::kKey);
Tensor channel_nonlocal(const Tensor& a, SoftmaxAxis axis = SoftmaxAxis::kKey);

Tensor dsnlb(const Tensor& a, const DsnlbParams& p, NonLocalMode mode = NonLocalMode::kBoth,
             SoftmaxAxis axis = SoftmaxAxis::kKey);

// Stack of 5 blocks fed by the fifth side output; result[i] is the non-local
// feature for decoder stage i+1 (result[4] comes from the first hop).
std::array<Tensor, 5> nlgm_forward(const Tensor& s5, const NlgmParams& p,
                                   NonLocalMode mode = NonLocalMode::kBoth,
                                   SoftmaxAxis axis = SoftmaxAxis::kKey);

}  // namespace msod::nn
