#include "terse/model.hpp"

#include <cmath>
#include <random>

#include "terse/simd/kernels.hpp"

namespace terse::model {

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
      max_context <= 0)
    throw ContractError("model config: all extents must be positive");
  if (d_model % n_heads != 0)
    throw ContractError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  if (!(norm_eps > 0.0)) throw ContractError("model config: norm_eps must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},             {"max_context", c.max_context},
          {"norm_eps", c.norm_eps},     {"norm_placement", "pre"}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<int>();
    else if (key == "d_model") c.d_model = value.get<int>();
    else if (key == "n_layers") c.n_layers = value.get<int>();
    else if (key == "n_heads") c.n_heads = value.get<int>();
    else if (key == "d_ff") c.d_ff = value.get<int>();
    else if (key == "max_context") c.max_context = value.get<int>();
    else if (key == "norm_eps") c.norm_eps = value.get<double>();
    else if (key == "norm_placement") {
      if (value.get<std::string>() != "pre") throw ContractError("only pre-norm blocks are supported");
    } else {
      throw ContractError("model config: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor filled(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), true);
}

}  // namespace

Transformer::Transformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto V = static_cast<std::size_t>(cfg_.vocab_size);
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto f = static_cast<std::size_t>(cfg_.d_ff);
  const auto ctx = static_cast<std::size_t>(cfg_.max_context);
  const double s = 0.02;
  const double s_out = s / std::sqrt(2.0 * cfg_.n_layers);
  tok_emb_ = normal({V, d}, s, rng);
  pos_emb_ = normal({ctx, d}, s, rng);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerParams p;
    p.attn_norm = filled({d}, 1.0);
    p.wq = normal({d, d}, s, rng);
    p.wk = normal({d, d}, s, rng);
    p.wv = normal({d, d}, s, rng);
    p.wo = normal({d, d}, s_out, rng);
    p.mlp_norm = filled({d}, 1.0);
    p.w1 = normal({d, f}, s, rng);
    p.b1 = filled({f}, 0.0);
    p.w2 = normal({f, d}, s_out, rng);
    p.b2 = filled({d}, 0.0);
    layers_.push_back(std::move(p));
  }
  final_norm_ = filled({d}, 1.0);
  unembed_ = normal({d, V}, s, rng);
}

std::vector<std::pair<std::string, Tensor>> Transformer::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "attn_norm", p.attn_norm);
    out.emplace_back(pre + "wq", p.wq);
    out.emplace_back(pre + "wk", p.wk);
    out.emplace_back(pre + "wv", p.wv);
    out.emplace_back(pre + "wo", p.wo);
    out.emplace_back(pre + "mlp_norm", p.mlp_norm);
    out.emplace_back(pre + "w1", p.w1);
    out.emplace_back(pre + "b1", p.b1);
    out.emplace_back(pre + "w2", p.w2);
    out.emplace_back(pre + "b2", p.b2);
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("unembed", unembed_);
  return out;
}

std::vector<Tensor> Transformer::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Transformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

Transformer Transformer::deep_copy() const {
  Transformer c;
  c.cfg_ = cfg_;
  c.tok_emb_ = tok_emb_.clone();
  c.pos_emb_ = pos_emb_.clone();
  for (const auto& p : layers_)
    c.layers_.push_back({p.attn_norm.clone(), p.wq.clone(), p.wk.clone(), p.wv.clone(), p.wo.clone(),
                         p.mlp_norm.clone(), p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()});
  c.final_norm_ = final_norm_.clone();
  c.unembed_ = unembed_.clone();
  return c;
}

void Transformer::zero_grad() {
  for (auto t : parameters()) t.zero_grad();
}

void Transformer::set_requires_grad(bool on) {
  for (auto t : parameters()) t.set_requires_grad(on);
}

void Transformer::assign(const std::string& name, const Shape& shape, std::vector<double> values) {
  for (auto& [n, t] : named_parameters()) {
    if (n != name) continue;
    if (t.shape() != shape)
      throw ContractError("parameter " + name + " expects shape " + shape_str(t.shape()) + ", got " +
                          shape_str(shape));
    auto dst = t.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
    return;
  }
  throw ContractError("unknown parameter " + name);
}

namespace {

Tensor apply_hooks(Graph& g, const Tensor& h, int layer, const std::vector<ResidualHook>& hooks) {
  bool any = false;
  for (const auto& hk : hooks) any = any || hk.layer == layer;
  if (!any) return h;
  std::vector<double> values(h.data().begin(), h.data().end());
  const std::size_t d = h.cols();
  for (const auto& hk : hooks) {
    if (hk.layer != layer) continue;
    for (std::size_t i = 0; i < h.rows(); ++i) hk.fn(i, std::span<double>(values.data() + i * d, d));
  }
  return g.substitute(h, std::move(values));
}

}  // namespace

ForwardResult Transformer::forward(Graph& g, std::span<const int> tokens,
                                   const ForwardOptions& opts) const {
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg_.max_context))
    throw ContractError("forward: " + std::to_string(tokens.size()) + " tokens exceed context of " +
                        std::to_string(cfg_.max_context));
  for (const auto& hk : opts.hooks)
    if (hk.layer < 0 || hk.layer > cfg_.n_layers)
      throw ContractError("forward: hook layer " + std::to_string(hk.layer) + " outside [0," +
                          std::to_string(cfg_.n_layers) + "]");

  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

  ForwardResult res;
  Tensor h = g.add(g.embedding(tok_emb_, tokens), g.embedding(pos_emb_, positions));
  h = apply_hooks(g, h, 0, opts.hooks);
  if (opts.capture_residuals) res.residuals.push_back(h);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& p = layers_[static_cast<std::size_t>(l)];
    Tensor a = g.rmsnorm(h, p.attn_norm, cfg_.norm_eps);
    Tensor att = g.causal_attention(g.matmul(a, p.wq), g.matmul(a, p.wk), g.matmul(a, p.wv),
                                    static_cast<std::size_t>(cfg_.n_heads));
    Tensor ht = g.add(h, g.matmul(att, p.wo));
    Tensor m = g.rmsnorm(ht, p.mlp_norm, cfg_.norm_eps);
    Tensor f = g.gelu(g.add_bias(g.matmul(m, p.w1), p.b1));
    h = g.add(ht, g.add_bias(g.matmul(f, p.w2), p.b2));
    h = apply_hooks(g, h, l + 1, opts.hooks);
    if (opts.capture_residuals) {
      res.mid_residuals.push_back(ht);
      res.residuals.push_back(h);
    }
  }
  res.logits = g.matmul(g.rmsnorm(h, final_norm_, cfg_.norm_eps), unembed_);
  return res;
}

std::vector<double> Transformer::mlp_update(int layer, std::span<const double> h_tilde) const {
  const auto& p = layers_.at(static_cast<std::size_t>(layer));
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto f = static_cast<std::size_t>(cfg_.d_ff);
  if (h_tilde.size() != d) throw ContractError("mlp_update: row width mismatch");
  const auto& k = simd::kernels();
  std::vector<double> m(d), hidden(f), out(d);
  rowops::rmsnorm_row(h_tilde.data(), p.mlp_norm.data().data(), m.data(), d, cfg_.norm_eps);
  k.matmul(m.data(), p.w1.data().data(), hidden.data(), 1, d, f, false);
  for (std::size_t j = 0; j < f; ++j) hidden[j] = rowops::gelu_scalar(hidden[j] + p.b1[j]);
  k.matmul(hidden.data(), p.w2.data().data(), out.data(), 1, f, d, false);
  for (std::size_t j = 0; j < d; ++j) out[j] += p.b2[j];
  return out;
}

// ---------------------------------------------------------------------------

DecodeState::DecodeState(const Transformer& model, std::vector<ResidualHook> hooks,
                         bool capture_residuals)
    : model_(&model), hooks_(std::move(hooks)), capture_(capture_residuals) {
  const auto& c = model.config();
  for (const auto& hk : hooks_)
    if (hk.layer < 0 || hk.layer > c.n_layers)
      throw ContractError("decode: hook layer " + std::to_string(hk.layer) + " out of range");
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto ctx = static_cast<std::size_t>(c.max_context);
  kcache_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(ctx * d));
  vcache_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(ctx * d));
  if (capture_) captured_.assign(static_cast<std::size_t>(c.n_layers) + 1, std::vector<double>(ctx * d));
  const auto f = static_cast<std::size_t>(c.d_ff);
  x_.resize(d); a_.resize(d); q_.resize(d); k_.resize(d); v_.resize(d); att_.resize(d); o_.resize(d);
  ht_.resize(d); m_.resize(d); f_.resize(f); f2_.resize(d); probs_.resize(ctx);
  logits_.resize(static_cast<std::size_t>(c.vocab_size));
}

void DecodeState::run_hooks(int layer, std::span<double> row) {
  for (const auto& hk : hooks_)
    if (hk.layer == layer) hk.fn(len_, row);
  if (capture_)
    std::copy(row.begin(), row.end(),
              captured_[static_cast<std::size_t>(layer)].begin() +
                  static_cast<std::ptrdiff_t>(len_ * row.size()));
}

std::span<const double> DecodeState::step(int token) {
  const auto& c = model_->config();
  if (len_ >= capacity())
    throw ContractError("decode: context of " + std::to_string(capacity()) + " tokens exhausted");
  if (token < 0 || token >= c.vocab_size) throw ContractError("decode: token out of vocabulary");
  const auto& kern = simd::kernels();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const auto dh = d / H;
  const auto pos = len_;

  const double* te = model_->token_embedding().data().data() + static_cast<std::size_t>(token) * d;
  const double* pe = model_->position_embedding().data().data() + pos * d;
  for (std::size_t j = 0; j < d; ++j) x_[j] = te[j] + pe[j];
  run_hooks(0, x_);

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& p = model_->layer(l);
    auto& kc = kcache_[static_cast<std::size_t>(l)];
    auto& vc = vcache_[static_cast<std::size_t>(l)];
    rowops::rmsnorm_row(x_.data(), p.attn_norm.data().data(), a_.data(), d, c.norm_eps);
    kern.matmul(a_.data(), p.wq.data().data(), q_.data(), 1, d, d, false);
    kern.matmul(a_.data(), p.wk.data().data(), kc.data() + pos * d, 1, d, d, false);
    kern.matmul(a_.data(), p.wv.data().data(), vc.data() + pos * d, 1, d, d, false);
    for (std::size_t h = 0; h < H; ++h)
      rowops::attention_row(q_.data() + h * dh, kc.data() + h * dh, vc.data() + h * dh, d, pos + 1,
                            dh, probs_.data(), att_.data() + h * dh);
    kern.matmul(att_.data(), p.wo.data().data(), o_.data(), 1, d, d, false);
    for (std::size_t j = 0; j < d; ++j) ht_[j] = x_[j] + o_[j];
    rowops::rmsnorm_row(ht_.data(), p.mlp_norm.data().data(), m_.data(), d, c.norm_eps);
    kern.matmul(m_.data(), p.w1.data().data(), f_.data(), 1, d, f, false);
    for (std::size_t j = 0; j < f; ++j) f_[j] = rowops::gelu_scalar(f_[j] + p.b1[j]);
    kern.matmul(f_.data(), p.w2.data().data(), f2_.data(), 1, f, d, false);
    for (std::size_t j = 0; j < d; ++j) f2_[j] += p.b2[j];
    for (std::size_t j = 0; j < d; ++j) x_[j] = ht_[j] + f2_[j];
    run_hooks(l + 1, x_);
  }
  rowops::rmsnorm_row(x_.data(), model_->final_norm().data().data(), a_.data(), d, c.norm_eps);
  kern.matmul(a_.data(), model_->unembedding().data().data(), logits_.data(), 1, d,
              static_cast<std::size_t>(c.vocab_size), false);
  ++len_;
  return logits_;
}

std::span<const double> DecodeState::residual(int layer, std::size_t position) const {
  if (!capture_) throw ContractError("decode: residual capture was not enabled");
  if (position >= len_ || layer < 0 || layer > model_->config().n_layers)
    throw ContractError("decode: residual request out of range");
  const auto d = static_cast<std::size_t>(model_->config().d_model);
  return {captured_[static_cast<std::size_t>(layer)].data() + position * d, d};
}

std::vector<ResidualSnapshot> snapshots_at(const ForwardResult& fr, std::size_t position) {
  std::vector<ResidualSnapshot> out;
  for (std::size_t l = 0; l < fr.residuals.size(); ++l) {
    const auto& r = fr.residuals[l];
    const std::size_t d = r.cols();
    ResidualSnapshot s{static_cast<int>(l), position,
                       std::vector<double>(r.data().begin() + static_cast<std::ptrdiff_t>(position * d),
                                           r.data().begin() + static_cast<std::ptrdiff_t>((position + 1) * d))};
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace terse::model
