#pragma once

#include <array>
#include <vector>

#include "msod/rng.hpp"
#include "msod/tensor.hpp"

namespace msod::nn {

enum class LossNorm { kMean, kSum };

struct ConvParams {
  Tensor w, b;
};

ConvParams make_conv_params(int cout, int cin, int k, Rng& rng);

struct ErmParams {
  ConvParams merge;                 // 3x3, (C2 + C5) -> channels
  std::vector<ConvParams> erbs;     // 5 refinement convs, 3x3, channels -> channels
  std::vector<ConvParams> heads;    // 5 prediction convs, 1x1, channels -> 1
  int channels = 0;
};

ErmParams make_erm_params(int c2, int c5, int channels, Rng& rng);

struct ErmFeatures {
  Tensor e0;                 // merged seed feature at the S2 resolution
  std::array<Tensor, 5> e;   // refined edge features, one per decoder stage
};

// Upsamples s5 to s2's grid, merges, then refines through the 5 blocks.
ErmFeatures erm_forward(const Tensor& s2, const Tensor& s5, const ErmParams& p);

Tensor edge_head_logits(const Tensor& e, const ConvParams& head);

// Class-balanced cross entropy on sigmoid(logits): edge pixels weighted by
// the non-edge fraction and vice versa. An absent class gets weight 0 so the
// loss stays finite on degenerate ground truth.
Tensor weighted_edge_bce(const Tensor& logits, const Tensor& gt_edge, LossNorm norm);

// Full per-stage edge supervision: head conv, upsample to the ground-truth
// grid, then the weighted cross entropy above.
Tensor edge_loss(const Tensor& e, const ConvParams& head, const Tensor& gt_edge, LossNorm norm);

// Up(ReLU(conv1x1(x))): converts channels to the kernel's output count and
// resizes to the target grid.
Tensor unify(const Tensor& x, int target_h, int target_w, const ConvParams& p);

struct CaParams {
  Tensor fc1_w, fc1_b;  // C -> C/r
  Tensor fc2_w, fc2_b;  // C/r -> C
};

CaParams make_ca_params(int channels, int reduction, Rng& rng);

// Gate from global average pooling through a bottleneck, applied per channel.
Tensor channel_attention(const Tensor& x, const CaParams& p);

// CA(Cat(s, n_hat*e_hat, f_hat*e_hat)); inputs must already share s's grid.
Tensor ffg_fuse(const Tensor& s, const Tensor& n_hat, const Tensor& f_hat, const Tensor& e_hat,
                const CaParams& ca);

}  // namespace msod::nn
