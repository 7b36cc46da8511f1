#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msod/erm_ffg.hpp"
#include "msod/nlgm.hpp"
#include "msod/tensor.hpp"

namespace msod::nn {

// Placement of the non-local stack (architectures a-d):
//  kA: one block fed by S6, shared by every stage
//  kB: five chained blocks fed by S6, final output shared by every stage
//  kC: five chained blocks fed by S6, one output per stage
//  kD: five chained blocks fed by S5, one output per stage
enum class NlgmArch { kA, kB, kC, kD };

struct ModelConfig {
  std::vector<int> widths = {16, 32, 64, 64, 64, 64};
  int convs_per_stage = 2;
  bool nlgm = true;
  bool ffg = true;
  bool erm = true;
  NlgmArch arch = NlgmArch::kD;
  NonLocalMode nl_mode = NonLocalMode::kBoth;
  SoftmaxAxis softmax_axis = SoftmaxAxis::kKey;
  int ca_reduction = 4;
  LossNorm loss_norm = LossNorm::kMean;

  int erm_channels() const { return widths[1]; }
  int nlgm_channels() const { return arch == NlgmArch::kD ? widths[4] : widths[5]; }
  int nlgm_blocks() const { return arch == NlgmArch::kA ? 1 : 5; }
  // channel count entering decoder block i (0-based stage index)
  int fused_channels(int stage) const {
    if (stage == 5) return widths[5];
    if (!ffg) return widths[stage];
    return widths[stage] * (2 + (nlgm ? 1 : 0));
  }
  void validate() const;
};

struct ModelParams {
  ModelConfig config;
  std::vector<std::vector<ConvParams>> backbone;  // 6 stages
  std::vector<std::vector<ConvParams>> decoder;   // 6 blocks of 3 convs
  std::vector<ConvParams> side_heads;             // 6, 1x1 -> 1
  NlgmParams nlgm;                                // present iff config.nlgm
  ErmParams erm;                                  // present iff config.erm
  std::vector<ConvParams> unify_n;                // stages 1..5, iff nlgm
  std::vector<ConvParams> unify_f;                // stages 1..5
  std::vector<ConvParams> unify_e;                // stages 1..5, iff erm
  std::vector<CaParams> ca;                       // stages 1..5, iff ffg
  std::vector<ConvParams> fin_convs;              // stages 2..6 -> width of stage 1
  ConvParams final_head;                          // 1x1 -> 1

  // Enumerates every parameter tensor with a stable name, in a fixed order.
  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct Pyramid {
  std::array<Tensor, 6> s;
};

// Side outputs S1..S6 at strides 1,2,4,8,16,32. Height and width must be
// multiples of 16 (the two deepest stages saturate at 1x1 below 32).
Pyramid backbone_forward(const Tensor& image, const ModelParams& params);

struct ForwardResult {
  Pyramid pyramid;
  std::vector<Tensor> nonlocal;            // per stage 1..5 when nlgm is on
  Tensor e0;
  std::vector<Tensor> edges;               // E1..E5 when erm is on
  std::array<Tensor, 6> features;          // F1..F6
  std::array<Tensor, 6> side_logits;       // single-channel, at stage resolution
  Tensor fin_feature;
  Tensor fin_logits;
  Tensor prediction;                       // sigmoid, input resolution
  std::array<double, 5> nonlocal_branch_l1{};  // probe: gated N branch per stage
};

ForwardResult model_forward(const Tensor& image, const ModelParams& params);

Tensor infer(const Tensor& image, const ModelParams& params);

// Unweighted cross entropy on sigmoid(logits); logits are upsampled to the
// ground-truth grid first.
Tensor saliency_bce(const Tensor& logits, const Tensor& gt, LossNorm norm);
Tensor saliency_loss(const Tensor& side_logits, const Tensor& gt, LossNorm norm);

struct LossResult {
  Tensor total;
  std::vector<Tensor> side_terms;  // 6
  std::vector<Tensor> edge_terms;  // 5 when erm is on, else empty
  Tensor fin_term;
  ForwardResult forward;
};

LossResult total_loss(const Tensor& image, const Tensor& gt_mask, const Tensor& gt_edge,
                      const ModelParams& params);

// ---- optimizer / training ----

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ModelParams& params, AdamOptions options = {});
  // Applies one update from the gradients currently on the parameters,
  // replacing each tensor with a fresh leaf.
  void step(ModelParams& params, double lr);

 private:
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

struct TrainSample {
  Tensor image, mask, edge;
};

struct TrainOptions {
  int steps = 300;
  int batch_size = 1;
  double lr = 2e-3;
  int decay_step = 0;  // 0: decay at 75% of steps
  std::uint64_t seed = 1;
};

struct StepLog {
  int step;
  double loss;
  double lr;
};

struct TrainAbort : std::runtime_error {
  TrainAbort(const std::string& msg, std::string tensor, int at_step)
      : std::runtime_error(msg), tensor_name(std::move(tensor)), step(at_step) {}
  std::string tensor_name;
  int step;
};

std::vector<StepLog> train(ModelParams& params, const std::vector<TrainSample>& data,
                           const TrainOptions& options);

// ---- checkpoint I/O (flat binary, magic "MSOD1") ----

void save_checkpoint(const std::string& path, ModelParams& params);
void load_checkpoint(const std::string& path, ModelParams& params);

}  // namespace msod::nn
