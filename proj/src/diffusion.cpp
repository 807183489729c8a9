#include "ddis/diffusion.hpp"

#include <cmath>
#include <string>

#include "ddis/ops.hpp"
#include "ddis/random.hpp"

namespace ddis {

double NoiseSchedule::abar(int t) const {
  if (t < 0 || t >= train_steps)
    throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(train_steps) + ")");
  return alpha_bar[static_cast<std::size_t>(t)];
}

NoiseSchedule make_schedule(int train_steps, double beta_start, double beta_end, int sample_steps, SigmaMode mode,
                            double cfg_scale) {
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw Error("make_schedule: need 0 < beta_start <= beta_end < 1");
  if (train_steps < 2) throw Error("make_schedule: need at least 2 training steps");
  if (sample_steps < 1 || sample_steps > train_steps - 1)
    throw Error("make_schedule: sampling steps must lie in [1, " + std::to_string(train_steps - 1) + "]");
  if (!(cfg_scale >= 0.0)) throw Error("make_schedule: cfg scale must be >= 0");

  NoiseSchedule s;
  s.train_steps = train_steps;
  s.mode = mode;
  s.cfg_scale = cfg_scale;
  const auto n = static_cast<std::size_t>(train_steps);
  s.beta.resize(n);
  s.alpha.resize(n);
  s.alpha_bar.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / static_cast<double>(n - 1);
    s.alpha[t] = 1.0 - s.beta[t];
  }
  s.alpha_bar[0] = 1.0;
  for (std::size_t t = 1; t < n; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];

  const double stride = static_cast<double>(train_steps - 1) / sample_steps;
  for (int i = 0; i <= sample_steps; ++i) s.timesteps.push_back(static_cast<int>(std::lround(i * stride)));
  for (int i = 0; i < sample_steps; ++i)
    s.sigma.push_back(step_sigma(s, s.timesteps[static_cast<std::size_t>(i) + 1], s.timesteps[static_cast<std::size_t>(i)]));
  return s;
}

double step_sigma(const NoiseSchedule& s, int t, int t_prev) {
  if (s.mode == SigmaMode::deterministic) return 0.0;
  const double a = s.abar(t), ap = s.abar(t_prev);
  return std::sqrt((1.0 - ap) / (1.0 - a) * (1.0 - a / ap));
}

namespace {
void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
}

int predecessor(const NoiseSchedule& s, int t) {
  for (std::size_t i = 1; i < s.timesteps.size(); ++i)
    if (s.timesteps[i] == t) return s.timesteps[i - 1];
  return t - 1;
}
}  // namespace

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  same_shape(x0, eps, "q_sample");
  const double a = s.abar(t);
  return add(mul_scalar(x0, std::sqrt(a)), mul_scalar(eps, std::sqrt(1.0 - a)));
}

Tensor mu_from_eps(const Tensor& x_t, const Tensor& eps, int t, const NoiseSchedule& s) {
  if (t <= 0) throw Error("mu_from_eps: timestep 0 has no predecessor");
  return mu_from_eps(x_t, eps, t, predecessor(s, t), s);
}

Tensor mu_from_eps(const Tensor& x_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& s) {
  same_shape(x_t, eps, "mu_from_eps");
  if (t <= 0) throw Error("mu_from_eps: timestep 0 has no predecessor");
  if (t_prev >= t) throw Error("mu_from_eps: predecessor must precede t");
  const double a = s.abar(t), ap = s.abar(t_prev);
  const double cx = std::sqrt(ap) / std::sqrt(a);
  const double ce = std::sqrt(1.0 - ap) - std::sqrt(ap) * std::sqrt(1.0 - a) / std::sqrt(a);
  return add(mul_scalar(x_t, cx), mul_scalar(eps, ce));
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps, int t, const NoiseSchedule& s) {
  same_shape(z_t, eps, "predict_x0");
  const double a = s.abar(t);
  return mul_scalar(sub(z_t, mul_scalar(eps, std::sqrt(1.0 - a))), 1.0 / std::sqrt(a));
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& s,
                 const Tensor& noise, double sigma) {
  same_shape(z_t, eps, "ddim_step");
  if (t_prev >= t) throw Error("ddim_step: t_prev must precede t");
  const double ap = s.abar(t_prev);
  const double dir2 = 1.0 - ap - sigma * sigma;
  if (dir2 < 0.0)
    throw Error("ddim_step: 1 - abar_prev - sigma^2 = " + std::to_string(dir2) + " is negative at t=" +
                std::to_string(t));
  Tensor out = add(mul_scalar(predict_x0(z_t, eps, t, s), std::sqrt(ap)), mul_scalar(eps, std::sqrt(dir2)));
  if (sigma != 0.0) {
    same_shape(z_t, noise, "ddim_step noise");
    out = add(out, mul_scalar(noise, sigma));
  }
  return out;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& s,
                 const Tensor& noise) {
  return ddim_step(z_t, eps, t, t_prev, s, noise, step_sigma(s, t, t_prev));
}

EpsilonFn epsilon_of(const DenoiserModel& model) {
  return [&model](const Tensor& z, int t, const Tensor& cond) { return model.forward(z, t, cond); };
}

EpsilonFn epsilon_of(const DenoiserView& view) {
  return [view](const Tensor& z, int t, const Tensor& cond) { return view.forward(z, t, cond); };
}

Tensor null_like(const Tensor& cond) {
  if (cond.ndim() < 2) throw ShapeError("null_like: condition must be [L, d] or [B, L, d]");
  return null_condition(cond.dim(cond.ndim() - 2), cond.dim(cond.ndim() - 1));
}

Tensor cfg_epsilon(const EpsilonFn& eps, const Tensor& z, int t, const Tensor& cond, const Tensor& null_cond,
                   double s) {
  if (!(s >= 0.0)) throw Error("cfg_epsilon: guidance scale must be >= 0");
  Tensor e_null = eps(z, t, null_cond);
  Tensor e_cond = eps(z, t, cond);
  return add(e_null, mul_scalar(sub(e_cond, e_null), s));
}

Tensor cfg_epsilon(const DenoiserModel& model, const Tensor& z, int t, const Tensor& cond, double s) {
  return cfg_epsilon(epsilon_of(model), z, t, cond, null_like(cond), s);
}

Tensor initial_latent(const Shape& latent_shape, std::span<const std::uint64_t> seeds) {
  return normal_batch(latent_shape, seeds);
}

Tensor reverse_step(const EpsilonFn& eps, const NoiseSchedule& s, const Tensor& cond, const Tensor& z, int i,
                    std::span<const std::uint64_t> seeds, const SamplerOptions& options, StepRecord* record) {
  if (i < 1 || i > s.steps()) throw Error("reverse_step: step index out of range");
  const int t = s.timesteps[static_cast<std::size_t>(i)];
  const int t_prev = s.timesteps[static_cast<std::size_t>(i) - 1];
  double loss = 0.0;
  bool has_loss = false;
  Tensor z_tilde = options.corrector ? options.corrector(z, t, loss, has_loss) : z;
  Tensor e = cfg_epsilon(eps, z_tilde, t, cond, null_like(cond), s.cfg_scale);
  const double sigma = s.sigma[static_cast<std::size_t>(i) - 1];
  Tensor noise;
  if (sigma != 0.0) {
    std::vector<std::uint64_t> step_seeds;
    for (auto sd : seeds) step_seeds.push_back(mix_seed(sd, 0x10000ULL + static_cast<std::uint64_t>(i)));
    Shape item(z.shape().begin() + 1, z.shape().end());
    noise = normal_batch(item, step_seeds);
  }
  Tensor next = ddim_step(z_tilde, e, t, t_prev, s, noise, sigma);
  if (!is_finite(next))
    throw NumericError("sampling: non-finite latent at step " + std::to_string(s.steps() - i + 1) + " (t=" +
                       std::to_string(t) + ")");
  if (record != nullptr) {
    record->t = t;
    record->t_prev = t_prev;
    if (options.record) {
      record->z = z.detach();
      record->z_tilde = z_tilde.detach();
      record->eps = e.detach();
    }
    record->l_bn = loss;
    record->has_l_bn = has_loss;
  }
  return next;
}

Tensor run_reverse(const EpsilonFn& eps, const NoiseSchedule& s, const Tensor& cond, Tensor z, int from, int to,
                   std::span<const std::uint64_t> seeds, const SamplerOptions& options, SampleTrace* trace) {
  if (from > s.steps() || to < 0 || to > from) throw Error("run_reverse: invalid step range");
  if (z.ndim() == 0 || static_cast<std::size_t>(z.dim(0)) != seeds.size())
    throw ShapeError("run_reverse: batch of " + to_string(z.shape()) + " does not match " +
                     std::to_string(seeds.size()) + " seeds");
  for (int i = from; i > to; --i) {
    StepRecord rec;
    z = reverse_step(eps, s, cond, z, i, seeds, options, trace ? &rec : nullptr);
    if (trace) trace->steps.push_back(std::move(rec));
  }
  return z;
}

SampleResult sample_with(const EpsilonFn& eps, const Codec& codec, const NoiseSchedule& s, const Tensor& cond,
                         std::span<const std::uint64_t> seeds, const SamplerOptions& options) {
  SampleResult out;
  out.trace.seeds.assign(seeds.begin(), seeds.end());
  Tensor z = initial_latent(codec.latent_shape(), seeds);
  z = run_reverse(eps, s, cond, z, s.steps(), 0, seeds, options, &out.trace);
  out.trace.z0 = z;
  NoGradGuard guard;
  out.x0 = codec.decode(z);
  return out;
}

SampleResult sample(const DenoiserModel& model, const Codec& codec, const NoiseSchedule& s, const Tensor& cond,
                    std::span<const std::uint64_t> seeds) {
  NoGradGuard guard;
  return sample_with(epsilon_of(model), codec, s, cond, seeds);
}

SampleResult sample(const DenoiserModel& model, const Codec& codec, const NoiseSchedule& s, const Tensor& cond,
                    std::uint64_t seed, std::size_t count) {
  auto seeds = seed_stream(seed, count);
  return sample(model, codec, s, cond, seeds);
}

}  // namespace ddis
