#include "msod/erm_ffg.hpp"

#include <cmath>
#include <stdexcept>

namespace msod::nn {

ConvParams make_conv_params(int cout, int cin, int k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
  std::vector<double> v(static_cast<std::size_t>(cout) * cin * k * k);
  for (double& e : v) e = rng.uniform(-bound, bound);
  ConvParams p;
  p.w = Tensor::from({cout, cin, k, k}, std::move(v), true);
  p.b = Tensor::zeros({cout}, true);
  return p;
}

ErmParams make_erm_params(int c2, int c5, int channels, Rng& rng) {
  ErmParams p;
  p.channels = channels;
  p.merge = make_conv_params(channels, c2 + c5, 3, rng);
  for (int i = 0; i < 5; ++i) p.erbs.push_back(make_conv_params(channels, channels, 3, rng));
  for (int i = 0; i < 5; ++i) p.heads.push_back(make_conv_params(1, channels, 1, rng));
  return p;
}

ErmFeatures erm_forward(const Tensor& s2, const Tensor& s5, const ErmParams& p) {
  if (p.erbs.size() != 5 || p.heads.size() != 5)
    throw std::invalid_argument("erm_forward: expected 5 refinement blocks");
  ErmFeatures out;
  Tensor s5_up = upsample_bilinear(s5, s2.extent(1), s2.extent(2));
  out.e0 = relu(conv2d(concat({s2, s5_up}), p.merge.w, p.merge.b, 1, Padding::kSame));
  Tensor cur = out.e0;
  for (int i = 0; i < 5; ++i) {
    cur = relu(conv2d(cur, p.erbs[i].w, p.erbs[i].b, 1, Padding::kSame));
    out.e[i] = cur;
  }
  return out;
}

Tensor edge_head_logits(const Tensor& e, const ConvParams& head) {
  return conv2d(e, head.w, head.b, 1, Padding::kSame);
}

Tensor weighted_edge_bce(const Tensor& logits, const Tensor& gt_edge, LossNorm norm) {
  if (logits.shape() != gt_edge.shape())
    throw std::invalid_argument("weighted_edge_bce: logits " + shape_str(logits.shape()) +
                                " vs ground truth " + shape_str(gt_edge.shape()));
  const int n = gt_edge.size();
  int positives = 0;
  for (double v : gt_edge.data()) positives += v >= 0.5 ? 1 : 0;
  const int negatives = n - positives;
  // weight of each class is the other class's frequency; an absent class
  // therefore zeroes the surviving term and the loss stays finite
  const double lambda_pos = static_cast<double>(negatives) / n;
  const double lambda_neg = static_cast<double>(positives) / n;
  std::vector<double> weights(n);
  for (int i = 0; i < n; ++i) weights[i] = gt_edge.data()[i] >= 0.5 ? lambda_pos : lambda_neg;
  Tensor wmap = Tensor::from(gt_edge.shape(), std::move(weights));
  // per-pixel CE from logits: softplus(z) - z*y
  Tensor ce = sub(softplus(logits), mul(logits, gt_edge));
  Tensor total = reduce_sum(mul(wmap, ce));
  return norm == LossNorm::kMean ? mul_scalar(total, 1.0 / n) : total;
}

Tensor edge_loss(const Tensor& e, const ConvParams& head, const Tensor& gt_edge, LossNorm norm) {
  Tensor logits = edge_head_logits(e, head);
  logits = upsample_bilinear(logits, gt_edge.extent(1), gt_edge.extent(2));
  return weighted_edge_bce(logits, gt_edge, norm);
}

Tensor unify(const Tensor& x, int target_h, int target_w, const ConvParams& p) {
  return upsample_bilinear(relu(conv2d(x, p.w, p.b, 1, Padding::kSame)), target_h, target_w);
}

CaParams make_ca_params(int channels, int reduction, Rng& rng) {
  const int hidden = std::max(1, channels / reduction);
  CaParams p;
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    std::vector<double> v(static_cast<std::size_t>(hidden) * channels);
    for (double& e : v) e = rng.uniform(-bound, bound);
    p.fc1_w = Tensor::from({hidden, channels}, std::move(v), true);
    p.fc1_b = Tensor::zeros({hidden}, true);
  }
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::vector<double> v(static_cast<std::size_t>(channels) * hidden);
    for (double& e : v) e = rng.uniform(-bound, bound);
    p.fc2_w = Tensor::from({channels, hidden}, std::move(v), true);
    p.fc2_b = Tensor::zeros({channels}, true);
  }
  return p;
}

Tensor channel_attention(const Tensor& x, const CaParams& p) {
  Tensor pooled = global_avg_pool(x);
  Tensor gate = sigmoid(fully_connected(relu(fully_connected(pooled, p.fc1_w, p.fc1_b)),
                                        p.fc2_w, p.fc2_b));
  return scale_channels(x, gate);
}

Tensor ffg_fuse(const Tensor& s, const Tensor& n_hat, const Tensor& f_hat, const Tensor& e_hat,
                const CaParams& ca) {
  return channel_attention(concat({s, mul(n_hat, e_hat), mul(f_hat, e_hat)}), ca);
}

}  // namespace msod::nn
