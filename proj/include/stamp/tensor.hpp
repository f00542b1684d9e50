// Copyright 2026 The STAMP-sim Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense kernel: flat parameter vectors and a tanh MLP (encoder + linear
// classification head) with hand-written backpropagation. All arithmetic is
// double precision. Every function here is pure.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stamp/errors.hpp"

namespace stamp {

// Flat vector in parameter space: model weights, gradients, pseudo-gradients.
// The length is fixed at construction.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : v_(n, fill) {}
  explicit ParamVector(std::vector<double> values) : v_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values) : v_(values) {}

  std::size_t size() const noexcept { return v_.size(); }
  bool empty() const noexcept { return v_.empty(); }

  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  std::span<double> span() noexcept { return v_; }
  std::span<const double> span() const noexcept { return v_; }
  const std::vector<double>& values() const noexcept { return v_; }

  auto begin() noexcept { return v_.begin(); }
  auto end() noexcept { return v_.end(); }
  auto begin() const noexcept { return v_.begin(); }
  auto end() const noexcept { return v_.end(); }

  bool all_finite() const {
    return std::all_of(v_.begin(), v_.end(), [](double x) { return std::isfinite(x); });
  }

  ParamVector& operator+=(const ParamVector& o) {
    check_same(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    check_same(o);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] -= o.v_[i];
    return *this;
  }
  ParamVector& operator*=(double s) {
    for (double& x : v_) x *= s;
    return *this;
  }

  // this += alpha * x
  void axpy(double alpha, const ParamVector& x) {
    check_same(x);
    for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += alpha * x.v_[i];
  }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  void check_same(const ParamVector& o) const {
    if (o.size() != size()) {
      throw ShapeError("ParamVector length mismatch: " + std::to_string(size()) + " vs " +
                       std::to_string(o.size()));
    }
  }

  std::vector<double> v_;
};

inline double dot(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const ParamVector& a) { return std::sqrt(dot(a, a)); }

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows_in) {
    if (rows_in.empty()) return {};
    Matrix m(rows_in.size(), rows_in.front().size());
    for (std::size_t r = 0; r < m.rows; ++r) {
      if (rows_in[r].size() != m.cols) throw ShapeError("Matrix::from_rows: ragged rows");
      std::copy(rows_in[r].begin(), rows_in[r].end(), m.row(r).begin());
    }
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

struct ModelShape {
  std::size_t input_dim = 0;
  std::vector<std::size_t> encoder_layer_dims;
  std::size_t num_classes = 0;

  std::size_t embedding_dim() const {
    return encoder_layer_dims.empty() ? input_dim : encoder_layer_dims.back();
  }

  void validate() const {
    if (input_dim == 0) throw ShapeError("ModelShape: input_dim must be >= 1");
    if (num_classes < 1) throw ShapeError("ModelShape: num_classes must be >= 1");
    for (std::size_t d : encoder_layer_dims) {
      if (d == 0) throw ShapeError("ModelShape: encoder layer width must be >= 1");
    }
  }

  // Offsets of each layer's weight block: encoder layers first, head last.
  // Each block is W (out x in, row-major) followed by b (out).
  struct Layer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t offset = 0;
    std::size_t weight_count() const { return in * out; }
    std::size_t total() const { return in * out + out; }
  };

  std::vector<Layer> layers() const {
    std::vector<Layer> out;
    std::size_t in = input_dim;
    std::size_t off = 0;
    for (std::size_t d : encoder_layer_dims) {
      out.push_back({in, d, off});
      off += in * d + d;
      in = d;
    }
    out.push_back({in, num_classes, off});
    return out;
  }

  std::size_t head_offset() const { return layers().back().offset; }
  std::size_t param_count() const {
    const auto ls = layers();
    return ls.back().offset + ls.back().total();
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct Batch {
  Matrix inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

struct ForwardResult {
  Matrix embeddings;
  Matrix logits;
  double loss = 0.0;
};

// dLoss/dEmbedding for a batch, produced by a loss defined on encoder outputs
// (the prototype loss). Consumed by encoder_backward.
struct EmbeddingSignal {
  Matrix inputs;
  Matrix d_embeddings;
};

// Structured view of one dense layer, used for inspection and export.
struct LayerParams {
  Matrix weight;  // out x in
  std::vector<double> bias;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

inline std::vector<LayerParams> unflatten(const ParamVector& params, const ModelShape& shape) {
  shape.validate();
  if (params.size() != shape.param_count()) throw ShapeError("unflatten: length mismatch");
  std::vector<LayerParams> out;
  for (const auto& layer : shape.layers()) {
    LayerParams lp{Matrix(layer.out, layer.in), std::vector<double>(layer.out)};
    const auto src = params.span().subspan(layer.offset, layer.total());
    std::copy_n(src.begin(), layer.weight_count(), lp.weight.data.begin());
    std::copy(src.begin() + long(layer.weight_count()), src.end(), lp.bias.begin());
    out.push_back(std::move(lp));
  }
  return out;
}

inline ParamVector flatten(const std::vector<LayerParams>& layers) {
  std::vector<double> v;
  for (const auto& lp : layers) {
    if (lp.bias.size() != lp.weight.rows) throw ShapeError("flatten: bias/weight mismatch");
    v.insert(v.end(), lp.weight.data.begin(), lp.weight.data.end());
    v.insert(v.end(), lp.bias.begin(), lp.bias.end());
  }
  return ParamVector(std::move(v));
}

// Glorot-uniform weights, zero biases.
inline ParamVector init_params(const ModelShape& shape, std::uint64_t seed) {
  shape.validate();
  ParamVector p(shape.param_count());
  std::mt19937_64 rng(seed);
  for (const auto& layer : shape.layers()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t i = 0; i < layer.weight_count(); ++i) p[layer.offset + i] = dist(rng);
  }
  return p;
}

namespace detail {

inline void check_params(const ParamVector& params, const ModelShape& shape) {
  shape.validate();
  if (params.size() != shape.param_count()) {
    throw ShapeError("params length " + std::to_string(params.size()) + " does not match shape (" +
                     std::to_string(shape.param_count()) + ")");
  }
}

inline void check_finite(const Matrix& m, const char* what) {
  for (double x : m.data) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

inline void check_batch(const Batch& batch, const ModelShape& shape) {
  if (batch.size() == 0) throw ShapeError("batch must contain at least one sample");
  if (batch.inputs.rows != batch.size()) throw ShapeError("batch: inputs rows != labels size");
  if (batch.inputs.cols != shape.input_dim) {
    throw ShapeError("batch input width " + std::to_string(batch.inputs.cols) +
                     " != input_dim " + std::to_string(shape.input_dim));
  }
  for (std::size_t y : batch.labels) {
    if (y >= shape.num_classes) throw ShapeError("label " + std::to_string(y) + " out of range");
  }
  check_finite(batch.inputs, "batch inputs");
}

// out = in * W^T + b
inline Matrix dense(const Matrix& in, const ParamVector& p, const ModelShape::Layer& layer) {
  Matrix out(in.rows, layer.out);
  const double* w = p.span().data() + layer.offset;
  const double* b = w + layer.weight_count();
  for (std::size_t r = 0; r < in.rows; ++r) {
    const auto x = in.row(r);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double* wr = w + o * layer.in;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t i = 0;
      for (; i + 4 <= layer.in; i += 4) {
        s0 += wr[i] * x[i];
        s1 += wr[i + 1] * x[i + 1];
        s2 += wr[i + 2] * x[i + 2];
        s3 += wr[i + 3] * x[i + 3];
      }
      for (; i < layer.in; ++i) s0 += wr[i] * x[i];
      out(r, o) = b[o] + ((s0 + s1) + (s2 + s3));
    }
  }
  return out;
}

// Accumulates dW += d_out^T * in, db += colsum(d_out) into grad and returns
// d_in = d_out * W.
inline Matrix dense_backward(const Matrix& in, const Matrix& d_out, const ParamVector& p,
                             const ModelShape::Layer& layer, ParamVector& grad, bool need_d_in) {
  const double* w = p.span().data() + layer.offset;
  double* gw = grad.span().data() + layer.offset;
  double* gb = gw + layer.weight_count();
  Matrix d_in;
  if (need_d_in) d_in = Matrix(in.rows, layer.in);
  const std::size_t n_in = layer.in;
  for (std::size_t r = 0; r < in.rows; ++r) {
    const double* __restrict x = in.row(r).data();
    double* __restrict dx = need_d_in ? d_in.row(r).data() : nullptr;
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double g = d_out(r, o);
      if (g == 0.0) continue;
      gb[o] += g;
      double* __restrict gwr = gw + o * n_in;
      const double* __restrict wr = w + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) gwr[i] += g * x[i];
      if (dx) {
        for (std::size_t i = 0; i < n_in; ++i) dx[i] += g * wr[i];
      }
    }
  }
  return d_in;
}

// Activations of every encoder layer; acts[0] is the input.
inline std::vector<Matrix> encode_all(const ParamVector& params, const ModelShape& shape,
                                      const Matrix& inputs) {
  const auto ls = shape.layers();
  std::vector<Matrix> acts;
  acts.reserve(ls.size());
  acts.push_back(inputs);
  for (std::size_t l = 0; l + 1 < ls.size(); ++l) {
    Matrix z = dense(acts.back(), params, ls[l]);
    for (double& v : z.data) v = std::tanh(v);
    acts.push_back(std::move(z));
  }
  return acts;
}

// Mean cross-entropy and its gradient w.r.t. logits (already divided by n).
inline double softmax_cross_entropy(const Matrix& logits, const std::vector<std::size_t>& labels,
                                    Matrix* d_logits) {
  const std::size_t n = logits.rows;
  if (d_logits) *d_logits = Matrix(n, logits.cols);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_z = mx + std::log(sum);
    total += log_z - z[labels[r]];
    if (d_logits) {
      auto d = d_logits->row(r);
      for (std::size_t c = 0; c < z.size(); ++c) d[c] = std::exp(z[c] - log_z) / double(n);
      d[labels[r]] -= 1.0 / double(n);
    }
  }
  return total / double(n);
}

// Backpropagates d_emb through the encoder stack into grad.
inline void encoder_backprop(const ParamVector& params, const ModelShape& shape,
                             const std::vector<Matrix>& acts, Matrix d_act, ParamVector& grad) {
  const auto ls = shape.layers();
  for (std::size_t l = ls.size() - 1; l-- > 0;) {
    const Matrix& a = acts[l + 1];
    for (std::size_t i = 0; i < d_act.data.size(); ++i) d_act.data[i] *= 1.0 - a.data[i] * a.data[i];
    d_act = dense_backward(acts[l], d_act, params, ls[l], grad, l > 0);
  }
}

}  // namespace detail

// Encoder output g(x; phi) for every row of inputs.
inline Matrix embed(const ParamVector& params, const ModelShape& shape, const Matrix& inputs) {
  detail::check_params(params, shape);
  if (inputs.cols != shape.input_dim) throw ShapeError("embed: input width mismatch");
  detail::check_finite(inputs, "inputs");
  return std::move(detail::encode_all(params, shape, inputs).back());
}

// Head logits for embeddings fed directly to the classification head.
inline Matrix head_logits(const ParamVector& params, const ModelShape& shape,
                          const Matrix& embeddings) {
  detail::check_params(params, shape);
  if (embeddings.cols != shape.embedding_dim()) throw ShapeError("head: embedding width mismatch");
  return detail::dense(embeddings, params, shape.layers().back());
}

inline ForwardResult forward(const ParamVector& params, const ModelShape& shape,
                             const Batch& batch) {
  detail::check_params(params, shape);
  detail::check_batch(batch, shape);
  auto acts = detail::encode_all(params, shape, batch.inputs);
  ForwardResult out;
  out.logits = detail::dense(acts.back(), params, shape.layers().back());
  out.loss = detail::softmax_cross_entropy(out.logits, batch.labels, nullptr);
  out.embeddings = std::move(acts.back());
  if (!std::isfinite(out.loss)) throw NumericError("forward: non-finite loss");
  return out;
}

inline double loss(const ParamVector& params, const ModelShape& shape, const Batch& batch) {
  return forward(params, shape, batch).loss;
}

// Gradient of the mean cross-entropy w.r.t. every parameter. The loss at
// params is stored in *loss_out when given.
inline ParamVector backward(const ParamVector& params, const ModelShape& shape,
                            const Batch& batch, double* loss_out = nullptr) {
  detail::check_params(params, shape);
  detail::check_batch(batch, shape);
  const auto acts = detail::encode_all(params, shape, batch.inputs);
  const auto ls = shape.layers();
  Matrix logits = detail::dense(acts.back(), params, ls.back());
  Matrix d_logits;
  const double l = detail::softmax_cross_entropy(logits, batch.labels, &d_logits);
  if (loss_out) *loss_out = l;

  ParamVector grad(params.size());
  const bool has_encoder = ls.size() > 1;
  Matrix d_emb = detail::dense_backward(acts.back(), d_logits, params, ls.back(), grad, has_encoder);
  if (has_encoder) detail::encoder_backprop(params, shape, acts, std::move(d_emb), grad);
  if (!grad.all_finite()) throw NumericError("backward: non-finite gradient");
  return grad;
}

// Cross-entropy gradient plus an extra embedding-space term in one pass:
// extra(embeddings) returns d(extra loss)/d(embeddings), or an empty matrix
// for no contribution. The extra loss enters the encoder slice only.
template <typename Extra>
ParamVector backward_with_embedding_term(const ParamVector& params, const ModelShape& shape,
                                         const Batch& batch, Extra&& extra, double* loss_out = nullptr) {
  detail::check_params(params, shape);
  detail::check_batch(batch, shape);
  const auto acts = detail::encode_all(params, shape, batch.inputs);
  const auto ls = shape.layers();
  Matrix logits = detail::dense(acts.back(), params, ls.back());
  Matrix d_logits;
  const double l = detail::softmax_cross_entropy(logits, batch.labels, &d_logits);
  if (loss_out) *loss_out = l;

  ParamVector grad(params.size());
  const bool has_encoder = ls.size() > 1;
  Matrix d_emb = detail::dense_backward(acts.back(), d_logits, params, ls.back(), grad, has_encoder);
  if (has_encoder) {
    const Matrix d_extra = extra(acts.back());
    if (!d_extra.data.empty()) {
      if (d_extra.rows != d_emb.rows || d_extra.cols != d_emb.cols) throw ShapeError("extra embedding term shape");
      for (std::size_t i = 0; i < d_emb.data.size(); ++i) d_emb.data[i] += d_extra.data[i];
    }
    detail::encoder_backprop(params, shape, acts, std::move(d_emb), grad);
  }
  if (!grad.all_finite()) throw NumericError("backward: non-finite gradient");
  return grad;
}

// Gradient restricted to the encoder parameters for a loss whose derivative
// w.r.t. the embeddings is given. The head slice is exactly zero.
inline ParamVector encoder_backward(const ParamVector& params, const ModelShape& shape,
                                    const EmbeddingSignal& signal) {
  detail::check_params(params, shape);
  if (signal.inputs.cols != shape.input_dim) throw ShapeError("encoder_backward: input width");
  if (signal.d_embeddings.rows != signal.inputs.rows ||
      signal.d_embeddings.cols != shape.embedding_dim()) {
    throw ShapeError("encoder_backward: signal shape mismatch");
  }
  detail::check_finite(signal.inputs, "signal inputs");
  detail::check_finite(signal.d_embeddings, "signal d_embeddings");
  ParamVector grad(params.size());
  if (shape.encoder_layer_dims.empty()) return grad;
  const auto acts = detail::encode_all(params, shape, signal.inputs);
  detail::encoder_backprop(params, shape, acts, signal.d_embeddings, grad);
  return grad;
}

// Mean cross-entropy gradient when the given embeddings are fed straight to
// the head. Only the head slice is nonzero.
inline ParamVector head_backward(const ParamVector& params, const ModelShape& shape,
                                 const Matrix& embeddings, const std::vector<std::size_t>& labels) {
  detail::check_params(params, shape);
  if (embeddings.cols != shape.embedding_dim() || embeddings.rows != labels.size() ||
      labels.empty()) {
    throw ShapeError("head_backward: embeddings/labels shape mismatch");
  }
  for (std::size_t y : labels) {
    if (y >= shape.num_classes) throw ShapeError("head_backward: label out of range");
  }
  detail::check_finite(embeddings, "embeddings");
  Matrix logits = detail::dense(embeddings, params, shape.layers().back());
  Matrix d_logits;
  detail::softmax_cross_entropy(logits, labels, &d_logits);
  ParamVector grad(params.size());
  detail::dense_backward(embeddings, d_logits, params, shape.layers().back(), grad, false);
  return grad;
}

inline std::vector<std::size_t> predict(const ParamVector& params, const ModelShape& shape,
                                        const Matrix& inputs) {
  const Matrix logits = head_logits(params, shape, embed(params, shape, inputs));
  std::vector<std::size_t> out(inputs.rows);
  for (std::size_t r = 0; r < inputs.rows; ++r) {
    const auto z = logits.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

inline double accuracy(const ParamVector& params, const ModelShape& shape, const Batch& batch) {
  if (batch.size() == 0) return 0.0;
  const auto pred = predict(params, shape, batch.inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == batch.labels[i];
  return double(hit) / double(pred.size());
}

}  // namespace stamp
