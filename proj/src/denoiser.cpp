#include "ddis/denoiser.hpp"

#include <cmath>

#include "ddis/ops.hpp"

namespace ddis {

ConditioningVocabulary::ConditioningVocabulary(std::vector<std::string> tokens, std::int64_t width,
                                               std::uint64_t seed, double scale)
    : tokens_(std::move(tokens)) {
  if (tokens_.empty()) throw Error("vocabulary needs at least the padding token");
  Rng rng(seed);
  table_ = rng.normal_tensor({size(), width}, scale > 0.0 ? scale : 1.0 / std::sqrt(static_cast<double>(width)));
  for (std::int64_t j = 0; j < width; ++j) table_.data()[j] = 0.0;
}

std::int64_t ConditioningVocabulary::id(const std::string& token) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (tokens_[i] == token) return static_cast<std::int64_t>(i);
  throw Error("unknown token '" + token + "'");
}

Tensor ConditioningVocabulary::embed(const std::vector<std::int64_t>& ids) const {
  for (auto id : ids)
    if (!contains(id))
      throw Error("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
  return gather_rows(table_, ids);
}

double ConditioningVocabulary::mean_row_norm() const {
  if (size() < 2) return 1.0;
  double total = 0.0;
  for (std::int64_t i = 1; i < size(); ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < width(); ++j) {
      const double v = table_[i * width() + j];
      s += v * v;
    }
    total += std::sqrt(s);
  }
  return total / static_cast<double>(size() - 1);
}

Tensor null_condition(std::int64_t length, std::int64_t width) { return Tensor({length, width}, 0.0); }

Tensor timestep_embedding(const std::vector<int>& t, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  Tensor out({static_cast<std::int64_t>(t.size()), dim}, 0.0);
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::int64_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out.data()[b * dim + i] = std::sin(t[b] * freq);
      out.data()[b * dim + half + i] = std::cos(t[b] * freq);
    }
  return out;
}

DenoiserModel::ResBlock DenoiserModel::make_block(Rng& rng, std::int64_t ch) {
  ResBlock rb;
  rb.w1 = init_conv(rng, ch, ch, 3);
  rb.b1 = Tensor({ch}, 0.0);
  rb.w2 = init_conv(rng, ch, ch, 3, 0.5);
  rb.b2 = Tensor({ch}, 0.0);
  rb.temb_w = init_linear(rng, ch, config_.time_dim);
  rb.temb_b = Tensor({ch}, 0.0);
  return rb;
}

DenoiserModel::DenoiserModel(DenoiserConfig config, std::uint64_t seed) : config_(config) {
  if (config_.size % 4 != 0) throw Error("denoiser: latent side must be divisible by 4");
  Rng rng(seed);
  const auto c = config_;
  t_w1_ = init_linear(rng, 2 * c.time_dim, c.time_dim);
  t_b1_ = Tensor({2 * c.time_dim}, 0.0);
  t_w2_ = init_linear(rng, c.time_dim, 2 * c.time_dim);
  t_b2_ = Tensor({c.time_dim}, 0.0);
  in_w_ = init_conv(rng, c.base, c.channels, 3);
  in_b_ = Tensor({c.base}, 0.0);
  r1_ = make_block(rng, c.base);
  d1_w_ = init_conv(rng, c.mid, c.base, 3);
  d1_b_ = Tensor({c.mid}, 0.0);
  r2_ = make_block(rng, c.mid);
  d2_w_ = init_conv(rng, c.deep, c.mid, 3);
  d2_b_ = Tensor({c.deep}, 0.0);
  r3_ = make_block(rng, c.deep);
  q_w_ = init_linear(rng, c.attn_dim, c.deep);
  k_w_ = init_linear(rng, c.attn_dim, c.embed_dim);
  v_w_ = init_linear(rng, c.attn_dim, c.embed_dim);
  o_w_ = init_linear(rng, c.deep, c.attn_dim, 0.5);
  u1_w_ = init_conv(rng, c.mid, c.deep + c.mid, 3);
  u1_b_ = Tensor({c.mid}, 0.0);
  r4_ = make_block(rng, c.mid);
  u2_w_ = init_conv(rng, c.base, c.mid + c.base, 3);
  u2_b_ = Tensor({c.base}, 0.0);
  r5_ = make_block(rng, c.base);
  out_w_ = init_conv(rng, c.channels, c.base, 3, 0.1);
  out_b_ = Tensor({c.channels}, 0.0);
}

ParameterList DenoiserModel::parameters() const {
  ParameterList p{{"time.w1", t_w1_}, {"time.b1", t_b1_}, {"time.w2", t_w2_}, {"time.b2", t_b2_},
                  {"in.w", in_w_},    {"in.b", in_b_}};
  auto block = [&p](const std::string& n, const ResBlock& rb) {
    p.push_back({n + ".w1", rb.w1});
    p.push_back({n + ".b1", rb.b1});
    p.push_back({n + ".w2", rb.w2});
    p.push_back({n + ".b2", rb.b2});
    p.push_back({n + ".temb_w", rb.temb_w});
    p.push_back({n + ".temb_b", rb.temb_b});
  };
  block("res1", r1_);
  p.push_back({"down1.w", d1_w_});
  p.push_back({"down1.b", d1_b_});
  block("res2", r2_);
  p.push_back({"down2.w", d2_w_});
  p.push_back({"down2.b", d2_b_});
  block("res3", r3_);
  p.push_back({"attn.q", q_w_});
  p.push_back({"attn.k", k_w_});
  p.push_back({"attn.v", v_w_});
  p.push_back({"attn.o", o_w_});
  p.push_back({"up1.w", u1_w_});
  p.push_back({"up1.b", u1_b_});
  block("res4", r4_);
  p.push_back({"up2.w", u2_w_});
  p.push_back({"up2.b", u2_b_});
  block("res5", r5_);
  p.push_back({"out.w", out_w_});
  p.push_back({"out.b", out_b_});
  return p;
}

Tensor DenoiserModel::res_block(const ResBlock& rb, const Tensor& x, const Tensor& temb) const {
  Tensor h = conv2d(silu(x), rb.w1, rb.b1, 1, 1);
  Tensor te = linear(silu(temb), rb.temb_w, rb.temb_b);
  h = add(h, reshape(te, {te.dim(0), te.dim(1), 1, 1}));
  h = conv2d(silu(h), rb.w2, rb.b2, 1, 1);
  return add(x, h);
}

Tensor DenoiserModel::forward(const Tensor& z, int t, const Tensor& cond, const AttentionHook* hook,
                              AttentionProbe* probe) const {
  if (z.ndim() == 0) throw ShapeError("denoiser: latent must be batched, got " + to_string(z.shape()));
  return forward(z, std::vector<int>(static_cast<std::size_t>(z.dim(0)), t), cond, hook, probe);
}

Tensor DenoiserModel::forward(const Tensor& z, const std::vector<int>& t, const Tensor& cond,
                              const AttentionHook* hook, AttentionProbe* probe) const {
  const auto& c = config_;
  if (z.ndim() != 4 || z.dim(1) != c.channels || z.dim(2) != c.size || z.dim(3) != c.size)
    throw ShapeError("denoiser: expected latent [B," + std::to_string(c.channels) + "," + std::to_string(c.size) +
                     "," + std::to_string(c.size) + "], got " + to_string(z.shape()));
  const std::int64_t B = z.dim(0);
  if (static_cast<std::int64_t>(t.size()) != B) throw ShapeError("denoiser: one timestep per sample required");
  for (int ti : t)
    if (ti < 0 || ti >= c.train_steps)
      throw Error("denoiser: timestep " + std::to_string(ti) + " outside [0, " + std::to_string(c.train_steps) + ")");
  const bool shared = cond.ndim() == 2;
  if (!(cond.ndim() == 2 || cond.ndim() == 3) || cond.dim(cond.ndim() - 1) != c.embed_dim ||
      (!shared && cond.dim(0) != B))
    throw ShapeError("denoiser: condition must be [L," + std::to_string(c.embed_dim) + "] or [B,L," +
                     std::to_string(c.embed_dim) + "], got " + to_string(cond.shape()));
  const std::int64_t L = cond.dim(cond.ndim() - 2);

  Tensor temb = timestep_embedding(t, c.time_dim);
  temb = linear(silu(linear(temb, t_w1_, t_b1_)), t_w2_, t_b2_);

  Tensor h1 = res_block(r1_, conv2d(z, in_w_, in_b_, 1, 1), temb);
  Tensor h2 = res_block(r2_, conv2d(h1, d1_w_, d1_b_, 2, 1), temb);
  Tensor h3 = res_block(r3_, conv2d(h2, d2_w_, d2_b_, 2, 1), temb);

  // Cross-attention from bottleneck positions to the condition tokens.
  const std::int64_t side = h3.dim(2), Q = side * side;
  Tensor q = linear(permute(reshape(h3, {B, c.deep, Q}), {0, 2, 1}), q_w_, Tensor());
  Tensor k = linear(cond, k_w_, Tensor());
  Tensor v = linear(cond, v_w_, Tensor());
  Tensor scores = mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c.attn_dim)));
  Tensor attn = softmax(scores);
  if (hook != nullptr && hook->weight != 1.0) {
    if (hook->token_index < 0 || hook->token_index >= L)
      throw Error("attention_reweight: token index " + std::to_string(hook->token_index) +
                  " outside condition of length " + std::to_string(L));
    Tensor column({L}, 1.0);
    column.data()[hook->token_index] = hook->weight;
    attn = mul(attn, column);
    attn = div(attn, sum_axes(attn, {2}, true));
  }
  if (probe != nullptr) probe->weights = attn.detach();
  Tensor o = linear(matmul(attn, v), o_w_, Tensor());
  h3 = add(h3, reshape(permute(o, {0, 2, 1}), {B, c.deep, side, side}));

  Tensor h = conv2d(concat({upsample_nearest2d(h3, 2), h2}, 1), u1_w_, u1_b_, 1, 1);
  h = res_block(r4_, h, temb);
  h = conv2d(concat({upsample_nearest2d(h, 2), h1}, 1), u2_w_, u2_b_, 1, 1);
  h = res_block(r5_, h, temb);
  return conv2d(silu(h), out_w_, out_b_, 1, 1);
}

DenoiserView attention_reweight(const DenoiserModel& model, std::int64_t token_index, double weight) {
  if (!(weight > 0.0)) throw Error("attention_reweight: weight must be positive");
  if (token_index < 0) throw Error("attention_reweight: negative token index");
  return DenoiserView(model, AttentionHook{token_index, weight});
}

Tensor denoiser_forward(const DenoiserModel& model, const Tensor& z, int t, const Tensor& cond) {
  return model.forward(z, t, cond);
}

Tensor denoiser_forward(const DenoiserModel& model, const ConditioningVocabulary& vocab, const Tensor& z, int t,
                        const std::vector<std::int64_t>& ids) {
  if (ids.empty()) return model.forward(z, t, null_condition(2, vocab.width()));
  return model.forward(z, t, vocab.embed(ids));
}

}  // namespace ddis
