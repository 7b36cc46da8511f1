#include "msod/nlgm.hpp"

#include <cmath>
#include <stdexcept>

namespace msod::nn {

namespace {

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  return conv2d(x, w, b, 1, Padding::kSame);
}

Tensor init_conv_weight(int cout, int cin, int k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
  std::vector<double> v(static_cast<std::size_t>(cout) * cin * k * k);
  for (double& e : v) e = rng.uniform(-bound, bound);
  return Tensor::from({cout, cin, k, k}, std::move(v), true);
}

int softmax_axis_index(SoftmaxAxis axis) { return axis == SoftmaxAxis::kKey ? 1 : 0; }

}  // namespace

DsnlbParams make_dsnlb_params(int channels, Rng& rng) {
  DsnlbParams p;
  p.w_query = init_conv_weight(channels, channels, 1, rng);
  p.b_query = Tensor::zeros({channels}, true);
  p.w_key = init_conv_weight(channels, channels, 1, rng);
  p.b_key = Tensor::zeros({channels}, true);
  p.w_value = init_conv_weight(channels, channels, 1, rng);
  p.b_value = Tensor::zeros({channels}, true);
  p.w_out = init_conv_weight(channels, channels, 1, rng);
  p.b_out = Tensor::zeros({channels}, true);
  return p;
}

NlgmParams make_nlgm_params(int channels, Rng& rng, int blocks) {
  NlgmParams p;
  for (int i = 0; i < blocks; ++i) p.blocks.push_back(make_dsnlb_params(channels, rng));
  return p;
}

Tensor spatial_similarity(const Tensor& a, const DsnlbParams& p, SoftmaxAxis axis) {
  const int c = a.extent(0), k = a.extent(1) * a.extent(2);
  Tensor query = reshape(conv1x1(a, p.w_query, p.b_query), {c, k});
  Tensor key = reshape(conv1x1(a, p.w_key, p.b_key), {c, k});
  Tensor logits = matmul(transpose2d(query), key);  // K x K
  return softmax(logits, softmax_axis_index(axis));
}

Tensor spatial_attention_branch(const Tensor& a, const DsnlbParams& p, SoftmaxAxis axis) {
  const int c = a.extent(0), h = a.extent(1), w = a.extent(2);
  Tensor sim = spatial_similarity(a, p, axis);
  Tensor value = reshape(conv1x1(a, p.w_value, p.b_value), {c, h * w});
  return reshape(matmul(value, transpose2d(sim)), {c, h, w});
}

Tensor spatial_nonlocal(const Tensor& a, const DsnlbParams& p, SoftmaxAxis axis) {
  if (a.rank() != 3) throw std::invalid_argument("spatial_nonlocal: input must be CxHxW, got " + shape_str(a.shape()));
  return add(spatial_attention_branch(a, p, axis), a);
}

Tensor channel_similarity(const Tensor& a, SoftmaxAxis axis) {
  const int c = a.extent(0), k = a.extent(1) * a.extent(2);
  Tensor flat = reshape(a, {c, k});
  Tensor logits = matmul(flat, transpose2d(flat));  // C x C
  return softmax(logits, softmax_axis_index(axis));
}

Tensor channel_nonlocal(const Tensor& a, SoftmaxAxis axis) {
  if (a.rank() != 3) throw std::invalid_argument("channel_nonlocal: input must be CxHxW, got " + shape_str(a.shape()));
  const int c = a.extent(0), h = a.extent(1), w = a.extent(2);
  Tensor flat = reshape(a, {c, h * w});
  Tensor sim = channel_similarity(a, axis);
  Tensor weighted = reshape(matmul(transpose2d(sim), flat), {c, h, w});
  return add(weighted, a);
}

Tensor dsnlb(const Tensor& a, const DsnlbParams& p, NonLocalMode mode, SoftmaxAxis axis) {
  Tensor combined;
  switch (mode) {
    case NonLocalMode::kBoth:
      combined = add(spatial_nonlocal(a, p, axis), channel_nonlocal(a, axis));
      break;
    case NonLocalMode::kSpatialOnly:
      combined = spatial_nonlocal(a, p, axis);
      break;
    case NonLocalMode::kChannelOnly:
      combined = channel_nonlocal(a, axis);
      break;
  }
  return conv1x1(combined, p.w_out, p.b_out);
}

std::array<Tensor, 5> nlgm_forward(const Tensor& s5, const NlgmParams& p, NonLocalMode mode,
                                   SoftmaxAxis axis) {
  if (p.blocks.size() != 5)
    throw std::invalid_argument("nlgm_forward: expected 5 blocks, got " + std::to_string(p.blocks.size()));
  std::array<Tensor, 5> out;
  out[4] = dsnlb(s5, p.blocks[4], mode, axis);
  for (int i = 3; i >= 0; --i) out[i] = dsnlb(out[i + 1], p.blocks[i], mode, axis);
  return out;
}

}  // namespace msod::nn
