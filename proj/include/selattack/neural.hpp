#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "selattack/tensor.hpp"

namespace selattack::neural {

// Named view over a parameter and its gradient buffer, both owned by a layer.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

// uniform(-s, s) with s = 1/sqrt(fan_in), drawn from a per-layer named stream.
Tensor init_uniform(std::vector<int> shape, int fan_in, uint64_t seed, std::string_view stream);

// Fully connected layer, y = x W + b. Input rows are independent, so the
// same layer serves batched vectors and per-token heads.
struct Dense {
  Tensor w;  // {in, out}
  Tensor b;  // {out}
  Tensor gw, gb;

  Dense() = default;
  Dense(int in, int out, uint64_t seed, std::string_view name);

  Tensor forward(const Tensor& x) const;
  // Accumulates gw/gb, returns gradient wrt x. `x` must be the forward input.
  Tensor backward(const Tensor& x, const Tensor& gy);
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
};

// 1-D convolution over a token sequence with zero 'same' padding.
// Input {L, in_ch}, output {L, out_ch}, kernel {width, in_ch, out_ch}.
struct Conv1d {
  int width = 0, in_ch = 0, out_ch = 0;
  Tensor w;
  Tensor b;
  Tensor gw, gb;

  Conv1d() = default;
  Conv1d(int width, int in_ch, int out_ch, uint64_t seed, std::string_view name);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& gy);
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
};

// Frozen lookup table, rows {V+1, d} with the last row reserved for UNK.
struct Embedding {
  const Tensor* table = nullptr;

  Tensor forward(const std::vector<int>& ids) const;
};

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& gy);

// {L, d} -> {1, d}, mean over the sequence axis.
Tensor mean_pool(const Tensor& x);
Tensor mean_pool_backward(int length, const Tensor& gy);

Tensor softmax_rows(const Tensor& logits);
Tensor softmax_backward(const Tensor& probs, const Tensor& gprobs);

// Mean over the batch of the squared L2 distance between probability rows.
double mse_loss(const Tensor& pred, const Tensor& target);
Tensor mse_loss_grad(const Tensor& pred, const Tensor& target);

// Mean negative log softmax probability of the true class.
double cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels);

struct OptimizerConfig {
  enum class Kind { sgd, adam };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam only
};

// Applies one update to every parameter and zeroes the gradients.
// Throws on non-finite gradients, naming the offending parameter.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}
  void step(const std::vector<ParamRef>& params);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// Central finite differences against the analytic gradients.
// `loss(true)` must run forward+backward and leave gradients populated;
// `loss(false)` must run forward only. Returns the max over parameter
// entries of |ga - gfd| / max(1e-8, |ga| + |gfd|).
double gradient_check(const std::vector<ParamRef>& params,
                      const std::function<double(bool with_grad)>& loss, double eps);

void zero_grads(const std::vector<ParamRef>& params);

}  // namespace selattack::neural
