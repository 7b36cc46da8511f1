#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "msod/gradcheck.hpp"
#include "msod/nlgm.hpp"
#include "msod/rng.hpp"

using namespace msod;
using namespace msod::nn;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool rg = false) {
  int n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), rg);
}

using Grid = std::vector<std::vector<double>>;  // [rows][cols]

// naive 1x1 convolution: out[c][p] = sum_c' w[c][c'] x[c'][p] + b[c]
Grid conv1x1_naive(const Grid& x, const std::vector<double>& w, const std::vector<double>& b,
                   int cout, int cin, int k) {
  Grid out(cout, std::vector<double>(k, 0.0));
  for (int co = 0; co < cout; ++co)
    for (int p = 0; p < k; ++p) {
      double acc = b[co];
      for (int ci = 0; ci < cin; ++ci) acc += w[co * cin + ci] * x[ci][p];
      out[co][p] = acc;
    }
  return out;
}

Grid softmax_rows_naive(const Grid& logits) {
  Grid out = logits;
  for (auto& row : out) {
    double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

Grid to_grid(const Tensor& t) {  // flattens CxHxW to C x (H*W)
  const int c = t.extent(0), k = t.size() / t.extent(0);
  Grid g(c, std::vector<double>(k));
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < k; ++p) g[ci][p] = t.data()[ci * k + p];
  return g;
}

// Direct loop transcription of the spatial block: similarity from projected
// query/key, softmax per row, weighted sum of values, plus the residual.
Grid spatial_oracle(const Tensor& a, const DsnlbParams& p) {
  const int c = a.extent(0), k = a.extent(1) * a.extent(2);
  Grid af = to_grid(a);
  Grid b = conv1x1_naive(af, p.w_query.data(), p.b_query.data(), c, c, k);
  Grid cm = conv1x1_naive(af, p.w_key.data(), p.b_key.data(), c, c, k);
  Grid d = conv1x1_naive(af, p.w_value.data(), p.b_value.data(), c, c, k);
  Grid logits(k, std::vector<double>(k, 0.0));
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      double acc = 0.0;
      for (int ci = 0; ci < c; ++ci) acc += b[ci][i] * cm[ci][j];
      logits[i][j] = acc;
    }
  Grid s = softmax_rows_naive(logits);
  Grid out(c, std::vector<double>(k, 0.0));
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < k; ++i) {
      double acc = 0.0;
      for (int j = 0; j < k; ++j) acc += d[ci][j] * s[i][j];
      out[ci][i] = acc + af[ci][i];
    }
  return out;
}

// Direct loop transcription of the channel block: gram similarity of the raw
// map, softmax per row, transposed weighting, plus the residual.
Grid channel_oracle(const Tensor& a) {
  const int c = a.extent(0), k = a.extent(1) * a.extent(2);
  Grid af = to_grid(a);
  Grid logits(c, std::vector<double>(c, 0.0));
  for (int u = 0; u < c; ++u)
    for (int v = 0; v < c; ++v) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += af[u][p] * af[v][p];
      logits[u][v] = acc;
    }
  Grid x = softmax_rows_naive(logits);
  Grid out(c, std::vector<double>(k, 0.0));
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < k; ++p) {
      double acc = 0.0;
      for (int u = 0; u < c; ++u) acc += x[u][ci] * af[u][p];
      out[ci][p] = acc + af[ci][p];
    }
  return out;
}

void check_close(const Tensor& t, const Grid& ref, double tol) {
  const int c = t.extent(0), k = t.size() / t.extent(0);
  for (int ci = 0; ci < c; ++ci)
    for (int p = 0; p < k; ++p) {
      INFO("c=" << ci << " p=" << p);
      CHECK(std::abs(t.data()[ci * k + p] - ref[ci][p]) <= tol);
    }
}

DsnlbParams zeroed_value(DsnlbParams p) {
  p.w_value = Tensor::zeros(p.w_value.shape());
  p.b_value = Tensor::zeros(p.b_value.shape());
  return p;
}

}  // namespace

TEST_CASE("spatial block: zero value branch leaves the input untouched") {
  Rng rng(1);
  auto a = random_tensor(rng, {2, 3, 3});
  auto p = zeroed_value(make_dsnlb_params(2, rng));
  auto out = spatial_nonlocal(a, p);
  CHECK(out.data() == a.data());
}

TEST_CASE("spatial block at K=1 reduces to value plus residual") {
  Rng rng(2);
  auto a = random_tensor(rng, {3, 1, 1});
  auto p = make_dsnlb_params(3, rng);
  auto sim = spatial_similarity(a, p);
  CHECK(sim.size() == 1);
  CHECK(sim.value() == 1.0);
  auto out = spatial_nonlocal(a, p);
  auto d = conv2d(a, p.w_value, p.b_value, 1, Padding::kSame);
  for (int i = 0; i < a.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(d.data()[i] + a.data()[i]).epsilon(1e-15));
}

TEST_CASE("spatial block matches the nested-loop oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    const int c = rng.uniform_int(1, 4), h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
    auto a = random_tensor(rng, {c, h, w});
    auto p = make_dsnlb_params(c, rng);
    check_close(spatial_nonlocal(a, p), spatial_oracle(a, p), 1e-12);
  }
}

TEST_CASE("channel block trivial cases") {
  auto zero = Tensor::zeros({3, 2, 2});
  auto out = channel_nonlocal(zero);
  for (double v : out.data()) CHECK(v == 0.0);

  Rng rng(4);
  auto a = random_tensor(rng, {1, 3, 2});
  auto doubled = channel_nonlocal(a);
  for (int i = 0; i < a.size(); ++i)
    CHECK(doubled.data()[i] == doctest::Approx(2.0 * a.data()[i]).epsilon(1e-15));
}

TEST_CASE("channel block matches the nested-loop oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const int c = rng.uniform_int(1, 5), h = rng.uniform_int(1, 3), w = rng.uniform_int(1, 3);
    auto a = random_tensor(rng, {c, h, w});
    check_close(channel_nonlocal(a), channel_oracle(a), 1e-12);
  }
}

TEST_CASE("similarity matrices are row-stochastic") {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_tensor(rng, {3, 2, 3});
    auto p = make_dsnlb_params(3, rng);
    auto s = spatial_similarity(a, p);
    const int k = s.extent(0);
    for (int i = 0; i < k; ++i) {
      double sum = 0.0;
      for (int j = 0; j < k; ++j) sum += s.data()[i * k + j];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    auto x = channel_similarity(a);
    for (int u = 0; u < 3; ++u) {
      double sum = 0.0;
      for (int v = 0; v < 3; ++v) sum += x.data()[u * 3 + v];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("spatial block is permutation-equivariant over positions") {
  Rng rng(7);
  const int c = 2, h = 2, w = 3, k = h * w;
  auto a = random_tensor(rng, {c, h, w});
  auto p = make_dsnlb_params(c, rng);
  std::vector<int> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = k - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

  std::vector<double> permuted(a.size());
  for (int ci = 0; ci < c; ++ci)
    for (int pos = 0; pos < k; ++pos) permuted[ci * k + perm[pos]] = a.data()[ci * k + pos];
  auto a2 = Tensor::from({c, h, w}, permuted);

  auto out = spatial_nonlocal(a, p);
  auto out2 = spatial_nonlocal(a2, p);
  for (int ci = 0; ci < c; ++ci)
    for (int pos = 0; pos < k; ++pos)
      CHECK(std::abs(out2.data()[ci * k + perm[pos]] - out.data()[ci * k + pos]) <= 1e-12);
}

TEST_CASE("channel block is permutation-equivariant over channels") {
  Rng rng(8);
  const int c = 4, h = 2, w = 2, k = h * w;
  auto a = random_tensor(rng, {c, h, w});
  std::vector<int> perm(c);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = c - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

  std::vector<double> permuted(a.size());
  for (int ci = 0; ci < c; ++ci)
    for (int pos = 0; pos < k; ++pos) permuted[perm[ci] * k + pos] = a.data()[ci * k + pos];
  auto a2 = Tensor::from({c, h, w}, permuted);

  auto out = channel_nonlocal(a);
  auto out2 = channel_nonlocal(a2);
  for (int ci = 0; ci < c; ++ci)
    for (int pos = 0; pos < k; ++pos)
      CHECK(std::abs(out2.data()[perm[ci] * k + pos] - out.data()[ci * k + pos]) <= 1e-12);
}

TEST_CASE("residual property: output minus input equals the attention branch") {
  Rng rng(9);
  auto a = random_tensor(rng, {3, 3, 2});
  auto p = make_dsnlb_params(3, rng);
  auto branch = spatial_attention_branch(a, p);
  auto out = spatial_nonlocal(a, p);
  for (int i = 0; i < a.size(); ++i) {
    CHECK(out.data()[i] == branch.data()[i] + a.data()[i]);
    CHECK(std::abs((out.data()[i] - a.data()[i]) - branch.data()[i]) <= 1e-12);
  }
}

TEST_CASE("dsnlb trivial cases and composition oracle") {
  Rng rng(10);
  auto a = random_tensor(rng, {2, 2, 2});
  auto p = make_dsnlb_params(2, rng);

  auto pz = p;
  pz.w_out = Tensor::zeros(pz.w_out.shape());
  pz.b_out = Tensor::zeros(pz.b_out.shape());
  auto zero_out = dsnlb(a, pz);
  for (double v : zero_out.data()) CHECK(v == 0.0);

  // identity aggregation of a zero input stays zero
  auto pid = zeroed_value(p);
  std::vector<double> eye(4, 0.0);
  eye[0] = eye[3] = 1.0;
  pid.w_out = Tensor::from({2, 2, 1, 1}, eye);
  pid.b_out = Tensor::zeros({2});
  auto z = dsnlb(Tensor::zeros({2, 2, 2}), pid);
  for (double v : z.data()) CHECK(v == 0.0);

  // equals a 1x1 conv of the two oracle branches summed
  for (int trial = 0; trial < 10; ++trial) {
    const int c = rng.uniform_int(1, 3), h = rng.uniform_int(1, 3), w = rng.uniform_int(1, 3);
    auto x = random_tensor(rng, {c, h, w});
    auto pp = make_dsnlb_params(c, rng);
    Grid sp = spatial_oracle(x, pp);
    Grid ch = channel_oracle(x);
    Grid sum(c, std::vector<double>(h * w));
    for (int ci = 0; ci < c; ++ci)
      for (int pos = 0; pos < h * w; ++pos) sum[ci][pos] = sp[ci][pos] + ch[ci][pos];
    Grid expected = conv1x1_naive(sum, pp.w_out.data(), pp.b_out.data(), c, c, h * w);
    check_close(dsnlb(x, pp), expected, 1e-12);
  }
}

TEST_CASE("dsnlb configuration variants") {
  Rng rng(11);
  auto a = random_tensor(rng, {3, 2, 2});
  auto p = make_dsnlb_params(3, rng);
  const int c = 3, k = 4;
  Grid sp = spatial_oracle(a, p);
  Grid ch = channel_oracle(a);
  check_close(dsnlb(a, p, NonLocalMode::kSpatialOnly),
              conv1x1_naive(sp, p.w_out.data(), p.b_out.data(), c, c, k), 1e-12);
  check_close(dsnlb(a, p, NonLocalMode::kChannelOnly),
              conv1x1_naive(ch, p.w_out.data(), p.b_out.data(), c, c, k), 1e-12);
}

TEST_CASE("nlgm stack: zero aggregation kernels collapse everything to zero") {
  Rng rng(12);
  auto params = make_nlgm_params(3, rng);
  for (auto& blk : params.blocks) {
    blk.w_out = Tensor::zeros(blk.w_out.shape());
    blk.b_out = Tensor::zeros(blk.b_out.shape());
  }
  auto s5 = random_tensor(rng, {3, 2, 2});
  auto ns = nlgm_forward(s5, params);
  for (const auto& n : ns)
    for (double v : n.data()) CHECK(v == 0.0);
}

TEST_CASE("nlgm stack matches sequential application of dsnlb") {
  Rng rng(13);
  auto params = make_nlgm_params(4, rng);
  auto s5 = random_tensor(rng, {4, 6, 6});
  auto ns = nlgm_forward(s5, params);

  Tensor cur = s5;
  for (int hop = 4; hop >= 0; --hop) {
    cur = dsnlb(cur, params.blocks[hop]);
    for (int i = 0; i < cur.size(); ++i)
      CHECK(std::abs(ns[hop].data()[i] - cur.data()[i]) <= 1e-10);
  }

  NlgmParams bad = params;
  bad.blocks.pop_back();
  CHECK_THROWS_AS(nlgm_forward(s5, bad), std::invalid_argument);
}

TEST_CASE("nlgm parameter gradients pass finite differences") {
  Rng rng(14);
  auto a = random_tensor(rng, {2, 2, 3});
  auto p = make_dsnlb_params(2, rng);
  std::vector<Tensor> leaves = {Tensor::from(a.shape(), a.data()),
                                Tensor::from(p.w_query.shape(), p.w_query.data()),
                                Tensor::from(p.b_query.shape(), p.b_query.data()),
                                Tensor::from(p.w_key.shape(), p.w_key.data()),
                                Tensor::from(p.b_key.shape(), p.b_key.data()),
                                Tensor::from(p.w_value.shape(), p.w_value.data()),
                                Tensor::from(p.b_value.shape(), p.b_value.data()),
                                Tensor::from(p.w_out.shape(), p.w_out.data()),
                                Tensor::from(p.b_out.shape(), p.b_out.data())};
  auto forward = [](const std::vector<Tensor>& v) {
    DsnlbParams q{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
    auto y = dsnlb(v[0], q);
    return reduce_sum(mul(y, y));
  };
  auto res = finite_difference_check("dsnlb", forward, leaves, 1e-6);
  INFO("max rel err " << res.max_rel_err);
  CHECK(res.pass);
}
