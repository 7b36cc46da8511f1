#include "msod/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "msod/rng.hpp"

namespace msod {

namespace {

Tensor perturbed(const Tensor& t, int component, double delta) {
  std::vector<double> v = t.data();
  v[component] += delta;
  return Tensor::from(t.shape(), std::move(v), false);
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  int n = 1;
  for (int e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), false);
}

}  // namespace

CheckResult finite_difference_check(const std::string& name, const ForwardFn& f,
                                    const std::vector<Tensor>& leaves,
                                    double tolerance, double h,
                                    int component_budget,
                                    std::uint64_t sample_seed) {
  CheckResult result;
  result.name = name;
  result.tolerance = tolerance;

  // analytic gradients
  std::vector<Tensor> grad_leaves;
  grad_leaves.reserve(leaves.size());
  for (const Tensor& t : leaves)
    grad_leaves.push_back(Tensor::from(t.shape(), t.data(), true));
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(grad_leaves);
    tape.backward(loss);
    for (const Tensor& t : grad_leaves) analytic.push_back(t.grad());
  }

  Rng sampler(sample_seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& leaf = leaves[li];
    std::vector<int> components;
    if (component_budget < 0 || leaf.size() <= component_budget) {
      components.resize(leaf.size());
      for (int i = 0; i < leaf.size(); ++i) components[i] = i;
    } else {
      for (int i = 0; i < component_budget; ++i)
        components.push_back(sampler.uniform_int(0, leaf.size() - 1));
      std::sort(components.begin(), components.end());
      components.erase(std::unique(components.begin(), components.end()), components.end());
    }
    for (int comp : components) {
      std::vector<Tensor> plus = leaves, minus = leaves;
      plus[li] = perturbed(leaf, comp, h);
      minus[li] = perturbed(leaf, comp, -h);
      const double fplus = f(plus).value();
      const double fminus = f(minus).value();
      const double fd = (fplus - fminus) / (2.0 * h);
      const double an = analytic[li][comp];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.components;
    }
  }
  result.pass = result.max_rel_err < tolerance;
  return result;
}

namespace {

Tensor sum_all(const Tensor& t) { return reduce_sum(t); }

}  // namespace

std::vector<std::string> registered_op_names() {
  return {"matmul",      "softmax",          "conv2d",        "conv2d_stride2",
          "relu",        "sigmoid",          "softplus",      "upsample_bilinear",
          "global_avg_pool", "fully_connected", "concat",     "add",
          "sub",         "mul",              "add_scalar",    "mul_scalar",
          "transpose2d", "reshape",          "maxpool2d",     "reduce_sum",
          "scale_channels"};
}

std::vector<CheckResult> run_op_gradient_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  const double tol = 1e-6;
  const double conv_tol = 1e-5;

  {
    auto a = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {4, 2});
    out.push_back(finite_difference_check(
        "matmul", [](const std::vector<Tensor>& v) { return sum_all(matmul(v[0], v[1])); },
        {a, b}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {2, 5});
    // weighted sum so the softmax Jacobian is exercised off the diagonal
    auto wgt = random_tensor(rng, {2, 5});
    out.push_back(finite_difference_check(
        "softmax",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(softmax(v[0], 1), wgt)); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {2, 5, 5});
    auto w = random_tensor(rng, {3, 2, 3, 3});
    auto b = random_tensor(rng, {3});
    out.push_back(finite_difference_check(
        "conv2d",
        [](const std::vector<Tensor>& v) { return sum_all(conv2d(v[0], v[1], v[2], 1, Padding::kSame)); },
        {x, w, b}, conv_tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "conv2d_stride2",
        [](const std::vector<Tensor>& v) { return sum_all(conv2d(v[0], v[1], v[2], 2, Padding::kValid)); },
        {x, w, b}, conv_tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {3, 3});
    auto wgt = random_tensor(rng, {3, 3});
    out.push_back(finite_difference_check(
        "relu", [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(relu(v[0]), wgt)); },
        {x}, tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "sigmoid", [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(sigmoid(v[0]), wgt)); },
        {x}, tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "softplus", [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(softplus(v[0]), wgt)); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {2, 3, 4});
    auto wgt = random_tensor(rng, {2, 7, 9});
    out.push_back(finite_difference_check(
        "upsample_bilinear",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(upsample_bilinear(v[0], 7, 9), wgt)); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {3, 4, 4});
    auto wgt = random_tensor(rng, {3});
    out.push_back(finite_difference_check(
        "global_avg_pool",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(global_avg_pool(v[0]), wgt)); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {4});
    auto w = random_tensor(rng, {3, 4});
    auto b = random_tensor(rng, {3});
    out.push_back(finite_difference_check(
        "fully_connected",
        [](const std::vector<Tensor>& v) { return sum_all(fully_connected(v[0], v[1], v[2])); },
        {x, w, b}, tol, 1e-5, -1, seed));
  }
  {
    auto a = random_tensor(rng, {1, 3, 3});
    auto b = random_tensor(rng, {2, 3, 3});
    auto wgt = random_tensor(rng, {3, 3, 3});
    out.push_back(finite_difference_check(
        "concat",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(concat({v[0], v[1]}), wgt)); },
        {a, b}, tol, 1e-5, -1, seed));
  }
  {
    auto a = random_tensor(rng, {3, 3});
    auto b = random_tensor(rng, {3, 3});
    out.push_back(finite_difference_check(
        "add", [](const std::vector<Tensor>& v) { return sum_all(mul(add(v[0], v[1]), v[1])); },
        {a, b}, tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "sub", [](const std::vector<Tensor>& v) { return sum_all(mul(sub(v[0], v[1]), v[1])); },
        {a, b}, tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "mul", [](const std::vector<Tensor>& v) { return sum_all(mul(v[0], v[1])); },
        {a, b}, tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "add_scalar", [](const std::vector<Tensor>& v) { return sum_all(mul(add_scalar(v[0], 0.7), v[1])); },
        {a, b}, tol, 1e-5, -1, seed));
    out.push_back(finite_difference_check(
        "mul_scalar", [](const std::vector<Tensor>& v) { return sum_all(mul(mul_scalar(v[0], -1.3), v[1])); },
        {a, b}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {3, 4});
    auto wgt = random_tensor(rng, {4, 3});
    out.push_back(finite_difference_check(
        "transpose2d",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(transpose2d(v[0]), wgt)); },
        {x}, tol, 1e-5, -1, seed));
    auto wgt2 = random_tensor(rng, {2, 6});
    out.push_back(finite_difference_check(
        "reshape",
        [wgt2](const std::vector<Tensor>& v) { return reduce_sum(mul(reshape(v[0], {2, 6}), wgt2)); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {2, 4, 4});
    auto wgt = random_tensor(rng, {2, 2, 2});
    out.push_back(finite_difference_check(
        "maxpool2d",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(maxpool2d(v[0], 2), wgt)); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {2, 3});
    out.push_back(finite_difference_check(
        "reduce_sum", [](const std::vector<Tensor>& v) { return reduce_sum(v[0]); },
        {x}, tol, 1e-5, -1, seed));
  }
  {
    auto x = random_tensor(rng, {3, 2, 2});
    auto g = random_tensor(rng, {3});
    auto wgt = random_tensor(rng, {3, 2, 2});
    out.push_back(finite_difference_check(
        "scale_channels",
        [wgt](const std::vector<Tensor>& v) { return reduce_sum(mul(scale_channels(v[0], v[1]), wgt)); },
        {x, g}, tol, 1e-5, -1, seed));
  }
  return out;
}

}  // namespace msod
