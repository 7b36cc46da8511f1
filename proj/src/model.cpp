#include "msod/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "msod/rng.hpp"

namespace msod::nn {

void ModelConfig::validate() const {
  if (widths.size() != 6) throw std::invalid_argument("config: exactly 6 stage widths required");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("config: stage widths must be positive");
  if (convs_per_stage < 1) throw std::invalid_argument("config: convs_per_stage must be >= 1");
  if (ca_reduction < 1) throw std::invalid_argument("config: ca_reduction must be >= 1");
}

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  auto conv = [&](const std::string& name, ConvParams& p) {
    fn(name + ".w", p.w);
    fn(name + ".b", p.b);
  };
  for (std::size_t st = 0; st < backbone.size(); ++st)
    for (std::size_t c = 0; c < backbone[st].size(); ++c)
      conv("backbone.s" + std::to_string(st + 1) + ".conv" + std::to_string(c), backbone[st][c]);
  for (std::size_t st = 0; st < decoder.size(); ++st)
    for (std::size_t c = 0; c < decoder[st].size(); ++c)
      conv("decoder.s" + std::to_string(st + 1) + ".conv" + std::to_string(c), decoder[st][c]);
  for (std::size_t st = 0; st < side_heads.size(); ++st)
    conv("side_head.s" + std::to_string(st + 1), side_heads[st]);
  for (std::size_t i = 0; i < nlgm.blocks.size(); ++i) {
    const std::string base = "nlgm.block" + std::to_string(i);
    DsnlbParams& b = nlgm.blocks[i];
    fn(base + ".w_query", b.w_query);
    fn(base + ".b_query", b.b_query);
    fn(base + ".w_key", b.w_key);
    fn(base + ".b_key", b.b_key);
    fn(base + ".w_value", b.w_value);
    fn(base + ".b_value", b.b_value);
    fn(base + ".w_out", b.w_out);
    fn(base + ".b_out", b.b_out);
  }
  if (!erm.erbs.empty()) {
    conv("erm.merge", erm.merge);
    for (int i = 0; i < 5; ++i) conv("erm.erb" + std::to_string(i), erm.erbs[i]);
    for (int i = 0; i < 5; ++i) conv("erm.head" + std::to_string(i), erm.heads[i]);
  }
  for (std::size_t st = 0; st < unify_n.size(); ++st)
    conv("unify_n.s" + std::to_string(st + 1), unify_n[st]);
  for (std::size_t st = 0; st < unify_f.size(); ++st)
    conv("unify_f.s" + std::to_string(st + 1), unify_f[st]);
  for (std::size_t st = 0; st < unify_e.size(); ++st)
    conv("unify_e.s" + std::to_string(st + 1), unify_e[st]);
  for (std::size_t st = 0; st < ca.size(); ++st) {
    const std::string base = "ca.s" + std::to_string(st + 1);
    fn(base + ".fc1_w", ca[st].fc1_w);
    fn(base + ".fc1_b", ca[st].fc1_b);
    fn(base + ".fc2_w", ca[st].fc2_w);
    fn(base + ".fc2_b", ca[st].fc2_b);
  }
  for (std::size_t i = 0; i < fin_convs.size(); ++i)
    conv("fin.s" + std::to_string(i + 2), fin_convs[i]);
  conv("final_head", final_head);
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams p;
  p.config = config;
  const auto& w = config.widths;

  for (int st = 0; st < 6; ++st) {
    std::vector<ConvParams> stage;
    for (int c = 0; c < config.convs_per_stage; ++c) {
      const int cin = c == 0 ? (st == 0 ? 3 : w[st - 1]) : w[st];
      stage.push_back(make_conv_params(w[st], cin, 3, rng));
    }
    p.backbone.push_back(std::move(stage));
  }
  for (int st = 0; st < 6; ++st) {
    std::vector<ConvParams> block;
    for (int c = 0; c < 3; ++c) {
      const int cin = c == 0 ? config.fused_channels(st) : w[st];
      block.push_back(make_conv_params(w[st], cin, 3, rng));
    }
    p.decoder.push_back(std::move(block));
  }
  for (int st = 0; st < 6; ++st) p.side_heads.push_back(make_conv_params(1, w[st], 1, rng));
  if (config.nlgm) p.nlgm = make_nlgm_params(config.nlgm_channels(), rng, config.nlgm_blocks());
  if (config.erm) p.erm = make_erm_params(w[1], w[4], config.erm_channels(), rng);
  for (int st = 0; st < 5; ++st) {
    if (config.nlgm) p.unify_n.push_back(make_conv_params(w[st], config.nlgm_channels(), 1, rng));
  }
  for (int st = 0; st < 5; ++st) p.unify_f.push_back(make_conv_params(w[st], w[st + 1], 1, rng));
  for (int st = 0; st < 5; ++st) {
    if (config.erm) p.unify_e.push_back(make_conv_params(w[st], config.erm_channels(), 1, rng));
  }
  for (int st = 0; st < 5; ++st) {
    if (config.ffg) p.ca.push_back(make_ca_params(config.fused_channels(st), config.ca_reduction, rng));
  }
  for (int st = 1; st < 6; ++st) p.fin_convs.push_back(make_conv_params(w[0], w[st], 1, rng));
  p.final_head = make_conv_params(1, w[0], 1, rng);
  return p;
}

namespace {

Tensor conv_block(const Tensor& x, const std::vector<ConvParams>& convs) {
  Tensor cur = x;
  for (const ConvParams& c : convs) cur = relu(conv2d(cur, c.w, c.b, 1, Padding::kSame));
  return cur;
}

double l1_norm(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data()) acc += std::abs(v);
  return acc;
}

}  // namespace

Pyramid backbone_forward(const Tensor& image, const ModelParams& params) {
  if (image.rank() != 3 || image.extent(0) != 3)
    throw std::invalid_argument("backbone: image must be 3xHxW, got " + shape_str(image.shape()));
  const int h = image.extent(1), w = image.extent(2);
  if (h % 16 != 0 || w % 16 != 0)
    throw std::invalid_argument("backbone: image size " + std::to_string(h) + "x" + std::to_string(w) +
                                " not supported; height and width must be multiples of 16");
  Pyramid pyr;
  Tensor cur = image;
  for (int st = 0; st < 6; ++st) {
    pyr.s[st] = conv_block(cur, params.backbone[st]);
    if (st < 5) cur = maxpool2d(pyr.s[st], 2);
  }
  return pyr;
}

ForwardResult model_forward(const Tensor& image, const ModelParams& params) {
  const ModelConfig& cfg = params.config;
  ForwardResult fw;
  fw.pyramid = backbone_forward(image, params);
  const auto& s = fw.pyramid.s;

  if (cfg.nlgm) {
    fw.nonlocal.resize(5);
    const Tensor& input = cfg.arch == NlgmArch::kD ? s[4] : s[5];
    if (cfg.arch == NlgmArch::kA) {
      Tensor n = dsnlb(input, params.nlgm.blocks[0], cfg.nl_mode, cfg.softmax_axis);
      for (int st = 0; st < 5; ++st) fw.nonlocal[st] = n;
    } else if (cfg.arch == NlgmArch::kB) {
      Tensor cur = input;
      for (int hop = 4; hop >= 0; --hop)
        cur = dsnlb(cur, params.nlgm.blocks[hop], cfg.nl_mode, cfg.softmax_axis);
      for (int st = 0; st < 5; ++st) fw.nonlocal[st] = cur;
    } else {
      auto ns = nlgm_forward(input, params.nlgm, cfg.nl_mode, cfg.softmax_axis);
      for (int st = 0; st < 5; ++st) fw.nonlocal[st] = ns[st];
    }
  }

  if (cfg.erm) {
    ErmFeatures ef = erm_forward(s[1], s[4], params.erm);
    fw.e0 = ef.e0;
    fw.edges.assign(ef.e.begin(), ef.e.end());
  }

  fw.features[5] = conv_block(s[5], params.decoder[5]);
  for (int st = 4; st >= 0; --st) {
    const int th = s[st].extent(1), tw = s[st].extent(2);
    Tensor fhat = unify(fw.features[st + 1], th, tw, params.unify_f[st]);
    Tensor nhat, ehat;
    if (cfg.nlgm) nhat = unify(fw.nonlocal[st], th, tw, params.unify_n[st]);
    if (cfg.erm) ehat = unify(fw.edges[st], th, tw, params.unify_e[st]);

    Tensor fused;
    if (cfg.ffg) {
      std::vector<Tensor> parts{s[st]};
      if (cfg.nlgm) {
        Tensor gated_n = cfg.erm ? mul(nhat, ehat) : nhat;
        fw.nonlocal_branch_l1[st] = l1_norm(gated_n);
        parts.push_back(gated_n);
      }
      parts.push_back(cfg.erm ? mul(fhat, ehat) : fhat);
      fused = channel_attention(concat(parts), params.ca[st]);
    } else {
      fused = add(s[st], fhat);
      if (cfg.nlgm) {
        fw.nonlocal_branch_l1[st] = l1_norm(nhat);
        fused = add(fused, nhat);
      }
      if (cfg.erm) fused = add(fused, ehat);
    }
    fw.features[st] = conv_block(fused, params.decoder[st]);
  }

  for (int st = 0; st < 6; ++st)
    fw.side_logits[st] = conv2d(fw.features[st], params.side_heads[st].w, params.side_heads[st].b,
                                1, Padding::kSame);

  const int h1 = s[0].extent(1), w1 = s[0].extent(2);
  Tensor fin = fw.features[0];
  for (int st = 1; st < 6; ++st) {
    Tensor mapped = conv2d(fw.features[st], params.fin_convs[st - 1].w, params.fin_convs[st - 1].b,
                           1, Padding::kSame);
    fin = add(fin, upsample_bilinear(mapped, h1, w1));
  }
  fw.fin_feature = fin;
  fw.fin_logits = conv2d(fin, params.final_head.w, params.final_head.b, 1, Padding::kSame);
  fw.prediction = upsample_bilinear(sigmoid(fw.fin_logits), image.extent(1), image.extent(2));
  return fw;
}

Tensor infer(const Tensor& image, const ModelParams& params) {
  return model_forward(image, params).prediction;
}

Tensor saliency_bce(const Tensor& logits, const Tensor& gt, LossNorm norm) {
  if (logits.shape() != gt.shape())
    throw std::invalid_argument("saliency_bce: logits " + shape_str(logits.shape()) +
                                " vs ground truth " + shape_str(gt.shape()));
  // per-pixel CE from logits: softplus(z) - z*y
  Tensor total = reduce_sum(sub(softplus(logits), mul(logits, gt)));
  return norm == LossNorm::kMean ? mul_scalar(total, 1.0 / gt.size()) : total;
}

Tensor saliency_loss(const Tensor& side_logits, const Tensor& gt, LossNorm norm) {
  Tensor up = upsample_bilinear(side_logits, gt.extent(1), gt.extent(2));
  return saliency_bce(up, gt, norm);
}

LossResult total_loss(const Tensor& image, const Tensor& gt_mask, const Tensor& gt_edge,
                      const ModelParams& params) {
  const LossNorm norm = params.config.loss_norm;
  LossResult out;
  out.forward = model_forward(image, params);
  Tensor total;
  for (int st = 0; st < 6; ++st) {
    Tensor term = saliency_loss(out.forward.side_logits[st], gt_mask, norm);
    out.side_terms.push_back(term);
    total = st == 0 ? term : add(total, term);
  }
  if (params.config.erm) {
    for (int i = 0; i < 5; ++i) {
      Tensor term = edge_loss(out.forward.edges[i], params.erm.heads[i], gt_edge, norm);
      out.edge_terms.push_back(term);
      total = add(total, term);
    }
  }
  out.fin_term = saliency_bce(
      upsample_bilinear(out.forward.fin_logits, gt_mask.extent(1), gt_mask.extent(2)), gt_mask,
      norm);
  out.total = add(total, out.fin_term);
  return out;
}

// ---- Adam ----

Adam::Adam(ModelParams& params, AdamOptions options) : options_(options) {
  params.visit([&](const std::string&, Tensor& t) {
    m_.emplace_back(t.size(), 0.0);
    v_.emplace_back(t.size(), 0.0);
  });
}

void Adam::step(ModelParams& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  std::size_t idx = 0;
  params.visit([&](const std::string& name, Tensor& t) {
    if (idx >= m_.size() || static_cast<int>(m_[idx].size()) != t.size())
      throw std::runtime_error("Adam: parameter set changed shape at " + name);
    const std::vector<double> g = t.grad();
    std::vector<double> next = t.data();
    std::vector<double>& m = m_[idx];
    std::vector<double>& v = v_[idx];
    for (int i = 0; i < t.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      next[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
    t = Tensor::from(t.shape(), std::move(next), true);
    ++idx;
  });
}

// ---- training ----

namespace {

// Named activations in computation order, for NaN diagnostics.
std::vector<std::pair<std::string, Tensor>> trace_tensors(const LossResult& lr) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (int st = 0; st < 6; ++st)
    out.emplace_back("S" + std::to_string(st + 1), lr.forward.pyramid.s[st]);
  for (std::size_t i = 0; i < lr.forward.nonlocal.size(); ++i)
    out.emplace_back("N" + std::to_string(i + 1), lr.forward.nonlocal[i]);
  if (lr.forward.e0.defined()) out.emplace_back("E0", lr.forward.e0);
  for (std::size_t i = 0; i < lr.forward.edges.size(); ++i)
    out.emplace_back("E" + std::to_string(i + 1), lr.forward.edges[i]);
  for (int st = 5; st >= 0; --st)
    out.emplace_back("F" + std::to_string(st + 1), lr.forward.features[st]);
  for (int st = 0; st < 6; ++st)
    out.emplace_back("side_logits" + std::to_string(st + 1), lr.forward.side_logits[st]);
  out.emplace_back("F_fin", lr.forward.fin_feature);
  out.emplace_back("fin_logits", lr.forward.fin_logits);
  for (std::size_t i = 0; i < lr.side_terms.size(); ++i)
    out.emplace_back("loss_F" + std::to_string(i + 1), lr.side_terms[i]);
  for (std::size_t i = 0; i < lr.edge_terms.size(); ++i)
    out.emplace_back("loss_E" + std::to_string(i + 1), lr.edge_terms[i]);
  out.emplace_back("loss_fin", lr.fin_term);
  out.emplace_back("loss_total", lr.total);
  return out;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

std::vector<StepLog> train(ModelParams& params, const std::vector<TrainSample>& data,
                           const TrainOptions& options) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (options.steps < 0 || options.batch_size < 1)
    throw std::invalid_argument("train: steps must be >= 0 and batch_size >= 1");
  const int decay_after =
      options.decay_step > 0 ? options.decay_step : (options.steps * 3) / 4;

  Rng rng(options.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto reshuffle = [&] {
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(0, static_cast<int>(i))]);
  };
  reshuffle();

  Adam adam(params);
  std::vector<StepLog> log;
  std::size_t cursor = 0;
  for (int step = 1; step <= options.steps; ++step) {
    const double lr = step <= decay_after ? options.lr : options.lr * 0.1;
    std::vector<std::size_t> batch;
    for (int b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        reshuffle();
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    Tape tape;
    Tensor loss;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TrainSample& sample = data[batch[i]];
      Tensor term = total_loss(sample.image, sample.mask, sample.edge, params).total;
      loss = i == 0 ? term : add(loss, term);
    }
    if (batch.size() > 1) loss = mul_scalar(loss, 1.0 / batch.size());

    const double loss_value = loss.value();
    if (!std::isfinite(loss_value)) {
      // locate the first non-finite activation for the diagnostic
      const TrainSample& sample = data[batch[0]];
      LossResult probe = total_loss(sample.image, sample.mask, sample.edge, params);
      std::string name = "loss_total";
      for (const auto& [n, t] : trace_tensors(probe))
        if (!all_finite(t)) {
          name = n;
          break;
        }
      throw TrainAbort("train: non-finite loss at step " + std::to_string(step) +
                           "; first non-finite tensor: " + name,
                       name, step);
    }
    tape.backward(loss);
    adam.step(params, lr);
    log.push_back(StepLog{step, loss_value, lr});
  }
  return log;
}

// ---- checkpoint I/O ----

namespace {

constexpr char kMagic[5] = {'M', 'S', 'O', 'D', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(path + ": truncated checkpoint");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(b, 8);
}

double read_f64(std::istream& in, const std::string& path) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error(path + ": truncated checkpoint");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(kMagic, 5);
  params.visit([&](const std::string& name, Tensor& t) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(out, static_cast<std::uint32_t>(t.extent(i)));
    for (double v : t.data()) write_f64(out, v);
  });
  if (!out) throw std::runtime_error(path + ": write failed");
}

void load_checkpoint(const std::string& path, ModelParams& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0)
    throw std::runtime_error(path + ": not a checkpoint (bad magic)");

  std::map<std::string, Tensor> entries;
  while (true) {
    in.peek();
    if (in.eof()) break;
    const std::uint32_t name_len = read_u32(in, path);
    if (name_len > 4096) throw std::runtime_error(path + ": corrupt name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw std::runtime_error(path + ": truncated checkpoint");
    const std::uint32_t rank = read_u32(in, path);
    if (rank > 8) throw std::runtime_error(path + ": corrupt rank for " + name);
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int>(read_u32(in, path));
      n *= static_cast<std::size_t>(shape[i]);
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = read_f64(in, path);
    entries.emplace(name, Tensor::from(shape, std::move(values), true));
  }

  std::size_t used = 0;
  params.visit([&](const std::string& name, Tensor& t) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw std::runtime_error(path + ": checkpoint is missing parameter " + name +
                               " (configuration mismatch?)");
    if (it->second.shape() != t.shape())
      throw std::runtime_error(path + ": shape mismatch for " + name + ": checkpoint " +
                               shape_str(it->second.shape()) + " vs model " + shape_str(t.shape()));
    t = it->second;
    ++used;
  });
  if (used != entries.size())
    throw std::runtime_error(path + ": checkpoint has " + std::to_string(entries.size() - used) +
                             " unused parameters (configuration mismatch?)");
}

}  // namespace msod::nn
