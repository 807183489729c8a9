#pragma once

#include <string>
#include <vector>

#include "ddis/random.hpp"
#include "ddis/tensor.hpp"

namespace ddis {

struct Parameter {
  std::string name;
  Tensor value;  // shares storage with the owning model
};

using ParameterList = std::vector<Parameter>;

/// He-normal conv kernel [out, in, k, k] (fan-in scaled), optionally shrunk by `gain`.
Tensor init_conv(Rng& rng, std::int64_t out, std::int64_t in, std::int64_t k, double gain = 1.0);
/// Same for transposed-conv kernels [in, out, k, k].
Tensor init_conv_transpose(Rng& rng, std::int64_t in, std::int64_t out, std::int64_t k, double gain = 1.0);
Tensor init_linear(Rng& rng, std::int64_t out, std::int64_t in, double gain = 1.0);

void set_trainable(const ParameterList& params, bool on);
void zero_grads(const ParameterList& params);

/// SHA-256 (hex) over names, shapes and little-endian values of the parameters.
std::string hash_parameters(const ParameterList& params);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
};

/// Moment buffers for one tensor.
struct AdamSlot {
  std::vector<double> m, v;
};

/// Adam over a fixed set of leaf tensors; updates values in place from their grads.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step();
  void zero_grad();
  long steps() const { return steps_; }
  AdamOptions& options() { return options_; }
  const std::vector<AdamSlot>& slots() const { return slots_; }
  void restore(std::vector<AdamSlot> slots, long steps);

 private:
  std::vector<Tensor> params_;
  AdamOptions options_;
  std::vector<AdamSlot> slots_;
  long steps_ = 0;
};

}  // namespace ddis
