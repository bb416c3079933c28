#include "selattack/neural.hpp"

#include <algorithm>
#include <cmath>

#include "selattack/util.hpp"

namespace selattack::neural {

Tensor init_uniform(std::vector<int> shape, int fan_in, uint64_t seed, std::string_view stream) {
  Tensor t = Tensor::zeros(std::move(shape));
  double s = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  auto rng = named_rng(seed, stream);
  std::uniform_real_distribution<double> dist(-s, s);
  for (double& v : t.data) v = dist(rng);
  return t;
}

Dense::Dense(int in, int out, uint64_t seed, std::string_view name)
    : w(init_uniform({in, out}, in, seed, std::string(name) + ".w")),
      b(Tensor::zeros({out})),
      gw(Tensor::zeros({in, out})),
      gb(Tensor::zeros({out})) {}

Tensor Dense::forward(const Tensor& x) const {
  const int in = w.shape[0], out = w.shape[1];
  if (x.cols() != in)
    throw Error("dense: input shape " + x.shape_str() + " does not match weight shape " +
                w.shape_str());
  Tensor y = Tensor::zeros({x.rows(), out});
  for (int r = 0; r < x.rows(); ++r) {
    for (int o = 0; o < out; ++o) {
      double acc = b[o];
      for (int i = 0; i < in; ++i) acc += x.at(r, i) * w.at(i, o);
      y.at(r, o) = acc;
    }
  }
  return y;
}

Tensor Dense::backward(const Tensor& x, const Tensor& gy) {
  const int in = w.shape[0], out = w.shape[1];
  Tensor gx = Tensor::zeros({x.rows(), in});
  for (int r = 0; r < x.rows(); ++r) {
    for (int o = 0; o < out; ++o) {
      const double g = gy.at(r, o);
      gb[o] += g;
      for (int i = 0; i < in; ++i) {
        gw.at(i, o) += x.at(r, i) * g;
        gx.at(r, i) += w.at(i, o) * g;
      }
    }
  }
  return gx;
}

void Dense::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w", &w, &gw});
  out.push_back({prefix + ".b", &b, &gb});
}

Conv1d::Conv1d(int width_, int in_ch_, int out_ch_, uint64_t seed, std::string_view name)
    : width(width_),
      in_ch(in_ch_),
      out_ch(out_ch_),
      w(init_uniform({width_, in_ch_, out_ch_}, width_ * in_ch_, seed, std::string(name) + ".w")),
      b(Tensor::zeros({out_ch_})),
      gw(Tensor::zeros({width_, in_ch_, out_ch_})),
      gb(Tensor::zeros({out_ch_})) {}

Tensor Conv1d::forward(const Tensor& x) const {
  if (x.cols() != in_ch)
    throw Error("conv1d: input shape " + x.shape_str() + " does not match in_ch " +
                std::to_string(in_ch));
  const int L = x.rows();
  const int half = width / 2;
  Tensor y = Tensor::zeros({L, out_ch});
  for (int t = 0; t < L; ++t) {
    for (int o = 0; o < out_ch; ++o) {
      double acc = b[o];
      for (int k = 0; k < width; ++k) {
        int src = t + k - half;
        if (src < 0 || src >= L) continue;
        const size_t wbase = (static_cast<size_t>(k) * in_ch) * out_ch;
        for (int c = 0; c < in_ch; ++c)
          acc += x.at(src, c) * w.data[wbase + static_cast<size_t>(c) * out_ch + o];
      }
      y.at(t, o) = acc;
    }
  }
  return y;
}

Tensor Conv1d::backward(const Tensor& x, const Tensor& gy) {
  const int L = x.rows();
  const int half = width / 2;
  Tensor gx = Tensor::zeros({L, in_ch});
  for (int t = 0; t < L; ++t) {
    for (int o = 0; o < out_ch; ++o) {
      const double g = gy.at(t, o);
      gb[o] += g;
      for (int k = 0; k < width; ++k) {
        int src = t + k - half;
        if (src < 0 || src >= L) continue;
        const size_t wbase = (static_cast<size_t>(k) * in_ch) * out_ch;
        for (int c = 0; c < in_ch; ++c) {
          gw.data[wbase + static_cast<size_t>(c) * out_ch + o] += x.at(src, c) * g;
          gx.at(src, c) += w.data[wbase + static_cast<size_t>(c) * out_ch + o] * g;
        }
      }
    }
  }
  return gx;
}

void Conv1d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w", &w, &gw});
  out.push_back({prefix + ".b", &b, &gb});
}

Tensor Embedding::forward(const std::vector<int>& ids) const {
  const int d = table->cols();
  const int rows = table->rows();
  Tensor y = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (size_t t = 0; t < ids.size(); ++t) {
    int id = ids[t];
    if (id < 0 || id >= rows)
      throw Error("embedding: id " + std::to_string(id) + " out of range [0, " +
                  std::to_string(rows) + ")");
    for (int c = 0; c < d; ++c) y.at(static_cast<int>(t), c) = table->at(id, c);
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& gy) {
  Tensor gx = gy;
  for (size_t i = 0; i < gx.data.size(); ++i)
    if (x.data[i] <= 0.0) gx.data[i] = 0.0;
  return gx;
}

Tensor mean_pool(const Tensor& x) {
  const int L = x.rows(), d = x.cols();
  if (L == 0) throw Error("mean_pool: empty sequence");
  Tensor y = Tensor::zeros({1, d});
  for (int t = 0; t < L; ++t)
    for (int c = 0; c < d; ++c) y.at(0, c) += x.at(t, c);
  for (int c = 0; c < d; ++c) y.at(0, c) /= L;
  return y;
}

Tensor mean_pool_backward(int length, const Tensor& gy) {
  const int d = gy.cols();
  Tensor gx = Tensor::zeros({length, d});
  for (int t = 0; t < length; ++t)
    for (int c = 0; c < d; ++c) gx.at(t, c) = gy.at(0, c) / length;
  return gx;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  const int C = p.cols();
  for (int r = 0; r < p.rows(); ++r) {
    double mx = p.at(r, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, p.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      p.at(r, c) = std::exp(p.at(r, c) - mx);
      sum += p.at(r, c);
    }
    for (int c = 0; c < C; ++c) p.at(r, c) /= sum;
  }
  return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& gprobs) {
  Tensor gl = Tensor::zeros(probs.shape);
  const int C = probs.cols();
  for (int r = 0; r < probs.rows(); ++r) {
    double dot = 0.0;
    for (int c = 0; c < C; ++c) dot += probs.at(r, c) * gprobs.at(r, c);
    for (int c = 0; c < C; ++c) gl.at(r, c) = probs.at(r, c) * (gprobs.at(r, c) - dot);
  }
  return gl;
}

double mse_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target))
    throw Error("mse_loss: shape mismatch " + pred.shape_str() + " vs " + target.shape_str());
  const int B = pred.rows();
  if (B == 0) throw Error("mse_loss: empty batch");
  double acc = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    double d = pred.data[i] - target.data[i];
    acc += d * d;
  }
  return acc / B;
}

Tensor mse_loss_grad(const Tensor& pred, const Tensor& target) {
  const int B = pred.rows();
  Tensor g = Tensor::zeros(pred.shape);
  for (size_t i = 0; i < pred.data.size(); ++i)
    g.data[i] = 2.0 * (pred.data[i] - target.data[i]) / B;
  return g;
}

double cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  const int B = logits.rows(), C = logits.cols();
  if (static_cast<int>(labels.size()) != B)
    throw Error("cross_entropy: batch size mismatch");
  double acc = 0.0;
  for (int r = 0; r < B; ++r) {
    if (labels[r] < 0 || labels[r] >= C)
      throw Error("cross_entropy: label " + std::to_string(labels[r]) + " out of range [0, " +
                  std::to_string(C) + ")");
    double mx = logits.at(r, 0);
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits.at(r, c));
    double lse = 0.0;
    for (int c = 0; c < C; ++c) lse += std::exp(logits.at(r, c) - mx);
    lse = mx + std::log(lse);
    acc += lse - logits.at(r, labels[r]);
  }
  return acc / B;
}

Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels) {
  const int B = logits.rows(), C = logits.cols();
  Tensor probs = softmax_rows(logits);
  Tensor g = Tensor::zeros(logits.shape);
  for (int r = 0; r < B; ++r)
    for (int c = 0; c < C; ++c)
      g.at(r, c) = (probs.at(r, c) - (c == labels[r] ? 1.0 : 0.0)) / B;
  return g;
}

void Optimizer::step(const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params)
    if (!p.grad->all_finite())
      throw Error("optimizer: non-finite gradient in parameter '" + p.name + "'");
  ++t_;
  for (const ParamRef& p : params) {
    if (cfg_.kind == OptimizerConfig::Kind::sgd) {
      for (size_t i = 0; i < p.value->data.size(); ++i)
        p.value->data[i] -= cfg_.lr * p.grad->data[i];
    } else {
      auto it = moments_.find(p.name);
      if (it == moments_.end()) {
        it = moments_
                 .emplace(p.name, std::make_pair(Tensor::zeros(p.value->shape),
                                                 Tensor::zeros(p.value->shape)))
                 .first;
      }
      Tensor& m = it->second.first;
      Tensor& v = it->second.second;
      const double b1 = cfg_.beta1, b2 = cfg_.beta2;
      const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (size_t i = 0; i < p.value->data.size(); ++i) {
        const double g = p.grad->data[i];
        m.data[i] = b1 * m.data[i] + (1.0 - b1) * g;
        v.data[i] = b2 * v.data[i] + (1.0 - b2) * g * g;
        const double mhat = m.data[i] / bc1;
        const double vhat = v.data[i] / bc2;
        p.value->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
    p.grad->fill(0.0);
  }
}

void zero_grads(const std::vector<ParamRef>& params) {
  for (const ParamRef& p : params) p.grad->fill(0.0);
}

double gradient_check(const std::vector<ParamRef>& params,
                      const std::function<double(bool with_grad)>& loss, double eps) {
  zero_grads(params);
  loss(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const ParamRef& p : params) analytic.push_back(*p.grad);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = *params[pi].value;
    for (size_t i = 0; i < value.data.size(); ++i) {
      const double orig = value.data[i];
      value.data[i] = orig + eps;
      double lp = loss(false);
      value.data[i] = orig - eps;
      double lm = loss(false);
      value.data[i] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double ga = analytic[pi].data[i];
      const double rel = std::fabs(ga - fd) / std::max(1e-8, std::fabs(ga) + std::fabs(fd));
      worst = std::max(worst, rel);
    }
  }
  zero_grads(params);
  return worst;
}

}  // namespace selattack::neural
