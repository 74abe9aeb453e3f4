#include "psinet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "psinet/error.hpp"

namespace psinet::ad {

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

Variable::Variable(Tensor value, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Variable::grad() const {
  if (!node_) throw UsageError("grad() on undefined variable");
  if (node_->has_grad()) return node_->grad;
  return Tensor(node_->value.shape());
}

void Variable::zero_grad() {
  if (node_) node_->grad = Tensor();
}

void Tape::record(std::string op, std::function<void()> backward_fn) {
  names_.push_back(std::move(op));
  entries_.push_back(std::move(backward_fn));
}

void Tape::backward(const Variable& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : "<undefined>"));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward() on a loss that depends on no recorded parameter");
  }
  loss.node()->grad_buffer()[0] = 1.0f;
  visited_.clear();
  visited_.reserve(entries_.size());
  for (std::size_t i = entries_.size(); i-- > 0;) {
    visited_.push_back(i);
    entries_[i]();
  }
}

void Tape::clear() {
  names_.clear();
  entries_.clear();
  visited_.clear();
}

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in operand of shape " +
                       shape_string(t.shape()));
  }
}

namespace {

using NodePtr = std::shared_ptr<Node>;

bool wants_grad(std::initializer_list<const Variable*> vars) {
  for (const Variable* v : vars) {
    if (v->defined() && v->requires_grad()) return true;
  }
  return false;
}

void require_same_shape(const Variable& a, const Variable& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Variable& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " operand, got " + shape_string(x.shape()));
  }
}

}  // namespace

Variable add(Tape& tape, const Variable& a, const Variable& b) {
  require_same_shape(a, b, "add");
  require_finite(a.value(), "add");
  require_finite(b.value(), "add");
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  Variable y(std::move(out), wants_grad({&a, &b}));
  if (y.requires_grad()) {
    tape.record("add", [an = a.node(), bn = b.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      for (const NodePtr& n : {an, bn}) {
        if (!n->requires_grad) continue;
        auto d = n->grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return y;
}

Variable sub(Tape& tape, const Variable& a, const Variable& b) {
  require_same_shape(a, b, "sub");
  require_finite(a.value(), "sub");
  require_finite(b.value(), "sub");
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  Variable y(std::move(out), wants_grad({&a, &b}));
  if (y.requires_grad()) {
    tape.record("sub", [an = a.node(), bn = b.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      if (an->requires_grad) {
        auto d = an->grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (bn->requires_grad) {
        auto d = bn->grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    });
  }
  return y;
}

Variable mul(Tape& tape, const Variable& a, const Variable& b) {
  require_same_shape(a, b, "mul");
  require_finite(a.value(), "mul");
  require_finite(b.value(), "mul");
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  Variable y(std::move(out), wants_grad({&a, &b}));
  if (y.requires_grad()) {
    tape.record("mul", [an = a.node(), bn = b.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      if (an->requires_grad) {
        auto d = an->grad_buffer().data();
        const auto other = bn->value.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
      }
      if (bn->requires_grad) {
        auto d = bn->grad_buffer().data();
        const auto other = an->value.data();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
      }
    });
  }
  return y;
}

Variable scale(Tape& tape, const Variable& a, float factor) {
  require_finite(a.value(), "scale");
  Tensor out = a.value();
  for (float& v : out.data()) v *= factor;
  Variable y(std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    tape.record("scale", [an = a.node(), yn = y.node(), factor] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      auto d = an->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
    });
  }
  return y;
}

Variable relu(Tape& tape, const Variable& x) {
  require_finite(x.value(), "relu");
  Tensor out = x.value();
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  Variable y(std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    tape.record("relu", [xn = x.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      const auto xv = xn->value.data();
      auto d = xn->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0f) d[i] += g[i];
      }
    });
  }
  return y;
}

Variable sum(Tape& tape, const Variable& x) {
  require_finite(x.value(), "sum");
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  Variable y(Tensor::scalar(static_cast<float>(acc)), x.requires_grad());
  if (y.requires_grad()) {
    tape.record("sum", [xn = x.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const float g = yn->grad[0];
      for (float& d : xn->grad_buffer().data()) d += g;
    });
  }
  return y;
}

Variable mean(Tape& tape, const Variable& x) {
  require_finite(x.value(), "mean");
  const std::size_t n = x.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double acc = 0.0;
  for (float v : x.value().data()) acc += v;
  Variable y(Tensor::scalar(static_cast<float>(acc / double(n))),
             x.requires_grad());
  if (y.requires_grad()) {
    tape.record("mean", [xn = x.node(), yn = y.node(), n] {
      if (!yn->has_grad()) return;
      const float g = yn->grad[0] / static_cast<float>(n);
      for (float& d : xn->grad_buffer().data()) d += g;
    });
  }
  return y;
}

Variable reshape(Tape& tape, const Variable& x, Shape shape) {
  Variable y(x.value().reshaped(std::move(shape)), x.requires_grad());
  if (y.requires_grad()) {
    tape.record("reshape", [xn = x.node(), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      auto d = xn->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
  }
  return y;
}

Variable concat(Tape& tape, std::span<const Variable> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  bool grad = false;
  for (const Variable& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (p.value().rank() == 0 || t != tail) {
      throw ShapeError("concat: incompatible part shape " + shape_string(p.shape()) +
                       " (expected trailing " + shape_string(tail) + ")");
    }
    rows += p.shape()[0];
    grad = grad || p.requires_grad();
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  Tensor out(shape);
  std::size_t offset = 0;
  for (const Variable& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().numel();
  }
  Variable y(std::move(out), grad);
  if (grad) {
    std::vector<NodePtr> nodes;
    for (const Variable& p : parts) nodes.push_back(p.node());
    tape.record("concat", [nodes = std::move(nodes), yn = y.node()] {
      if (!yn->has_grad()) return;
      const auto g = yn->grad.data();
      std::size_t off = 0;
      for (const NodePtr& n : nodes) {
        const std::size_t len = n->value.numel();
        if (n->requires_grad) {
          auto d = n->grad_buffer().data();
          for (std::size_t i = 0; i < len; ++i) d[i] += g[off + i];
        }
        off += len;
      }
    });
  }
  return y;
}

Variable select_channel_blocks(Tape& tape, const Variable& x,
                               std::size_t block_size,
                               std::span<const std::size_t> blocks) {
  const Shape& s = x.shape();
  if (s.size() < 2 || block_size == 0 || s[1] % block_size != 0) {
    throw ShapeError("select_channel_blocks: channel dim of " + shape_string(s) +
                     " is not a multiple of block size " +
                     std::to_string(block_size));
  }
  const std::size_t n = s[0];
  const std::size_t channels = s[1];
  const std::size_t inner = shape_numel(s) / (n * channels);
  const std::size_t available = channels / block_size;
  for (std::size_t b : blocks) {
    if (b >= available) {
      throw ShapeError("select_channel_blocks: block " + std::to_string(b) +
                       " out of range (" + std::to_string(available) + " blocks)");
    }
  }
  Shape out_shape = s;
  out_shape[1] = blocks.size() * block_size;
  Tensor out(out_shape);
  const std::size_t chunk = block_size * inner;
  const std::vector<std::size_t> chosen(blocks.begin(), blocks.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      const float* src = x.value().raw() + (i * channels + chosen[j] * block_size) * inner;
      float* dst = out.raw() + (i * out_shape[1] + j * block_size) * inner;
      std::copy(src, src + chunk, dst);
    }
  }
  Variable y(std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    tape.record("select_channel_blocks",
                [xn = x.node(), yn = y.node(), chosen, n, channels, inner,
                 block_size, out_channels = out_shape[1], chunk] {
      if (!yn->has_grad()) return;
      auto& d = xn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < chosen.size(); ++j) {
          const float* src = yn->grad.raw() + (i * out_channels + j * block_size) * inner;
          float* dst = d.raw() + (i * channels + chosen[j] * block_size) * inner;
          for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return y;
}

Variable matmul(Tape& tape, const Variable& a, const Variable& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()));
  }
  require_finite(a.value(), "matmul");
  require_finite(b.value(), "matmul");
  Tensor out({m, n});
  const float* av = a.value().raw();
  const float* bv = b.value().raw();
  float* ov = out.raw();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const float s = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += s * bv[p * n + j];
    }
  }
  Variable y(std::move(out), wants_grad({&a, &b}));
  if (y.requires_grad()) {
    tape.record("matmul", [an = a.node(), bn = b.node(), yn = y.node(), m, k, n] {
      if (!yn->has_grad()) return;
      const float* g = yn->grad.raw();
      if (an->requires_grad) {
        float* da = an->grad_buffer().raw();
        const float* bv = bn->value.raw();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            float acc = 0.0f;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            da[i * k + p] += acc;
          }
      }
      if (bn->requires_grad) {
        float* db = bn->grad_buffer().raw();
        const float* av = an->value.raw();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const float s = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += s * g[i * n + j];
          }
      }
    });
  }
  return y;
}

Variable linear(Tape& tape, const Variable& x, const Variable& weight,
                const Variable& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw ShapeError("linear: input features " + std::to_string(in) +
                     " do not match weight " + shape_string(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out}) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) +
                     " does not match " + std::to_string(out) + " outputs");
  }
  require_finite(x.value(), "linear");
  require_finite(weight.value(), "linear");
  Tensor y_val({n, out});
  const float* xv = x.value().raw();
  const float* wv = weight.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      float acc = bias.defined() ? bias.value()[o] : 0.0f;
      const float* xr = xv + i * in;
      const float* wr = wv + o * in;
      for (std::size_t j = 0; j < in; ++j) acc += xr[j] * wr[j];
      y_val[i * out + o] = acc;
    }
  }
  Variable y(std::move(y_val), wants_grad({&x, &weight, &bias}));
  if (y.requires_grad()) {
    tape.record("linear", [xn = x.node(), wn = weight.node(),
                           bn = bias.defined() ? bias.node() : NodePtr{},
                           yn = y.node(), n, in, out] {
      if (!yn->has_grad()) return;
      const float* g = yn->grad.raw();
      if (xn->requires_grad) {
        float* dx = xn->grad_buffer().raw();
        const float* wv = wn->value.raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < out; ++o) {
            const float go = g[i * out + o];
            for (std::size_t j = 0; j < in; ++j) dx[i * in + j] += go * wv[o * in + j];
          }
      }
      if (wn->requires_grad) {
        float* dw = wn->grad_buffer().raw();
        const float* xv = xn->value.raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < out; ++o) {
            const float go = g[i * out + o];
            for (std::size_t j = 0; j < in; ++j) dw[o * in + j] += go * xv[i * in + j];
          }
      }
      if (bn && bn->requires_grad) {
        float* db = bn->grad_buffer().raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t o = 0; o < out; ++o) db[o] += g[i * out + o];
      }
    });
  }
  return y;
}

Variable block_linear(Tape& tape, const Variable& x, const Variable& weight,
                      const Variable& bias, std::size_t num_blocks,
                      std::span<const std::size_t> row_block,
                      std::span<const std::size_t> out_col,
                      std::size_t out_width, float fill) {
  require_rank(x, 2, "block_linear");
  require_rank(weight, 2, "block_linear");
  const std::size_t n = x.shape()[0], features = x.shape()[1];
  const std::size_t rows = weight.shape()[0];
  if (num_blocks == 0 || features % num_blocks != 0) {
    throw ShapeError("block_linear: " + std::to_string(features) +
                     " input features do not split into " +
                     std::to_string(num_blocks) + " blocks");
  }
  const std::size_t block = features / num_blocks;
  if (weight.shape()[1] != block || row_block.size() != rows ||
      out_col.size() != rows) {
    throw ShapeError("block_linear: weight " + shape_string(weight.shape()) +
                     " inconsistent with block size " + std::to_string(block) +
                     " and " + std::to_string(row_block.size()) + " row assignments");
  }
  if (bias.defined() && bias.shape() != Shape{rows}) {
    throw ShapeError("block_linear: bias " + shape_string(bias.shape()) +
                     " does not match " + std::to_string(rows) + " rows");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_block[r] >= num_blocks || out_col[r] >= out_width) {
      throw ShapeError("block_linear: row " + std::to_string(r) +
                       " maps outside the input blocks or output columns");
    }
  }
  require_finite(x.value(), "block_linear");
  require_finite(weight.value(), "block_linear");
  Tensor y_val({n, out_width}, fill);
  const float* xv = x.value().raw();
  const float* wv = weight.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < rows; ++r) {
      float acc = bias.defined() ? bias.value()[r] : 0.0f;
      const float* xr = xv + i * features + row_block[r] * block;
      const float* wr = wv + r * block;
      for (std::size_t j = 0; j < block; ++j) acc += xr[j] * wr[j];
      y_val[i * out_width + out_col[r]] = acc;
    }
  }
  Variable y(std::move(y_val), wants_grad({&x, &weight, &bias}));
  if (y.requires_grad()) {
    tape.record("block_linear",
                [xn = x.node(), wn = weight.node(),
                 bn = bias.defined() ? bias.node() : NodePtr{}, yn = y.node(),
                 rb = std::vector<std::size_t>(row_block.begin(), row_block.end()),
                 oc = std::vector<std::size_t>(out_col.begin(), out_col.end()), n,
                 features, block, rows, out_width] {
      if (!yn->has_grad()) return;
      const float* g = yn->grad.raw();
      if (xn->requires_grad) {
        float* dx = xn->grad_buffer().raw();
        const float* wv = wn->value.raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t r = 0; r < rows; ++r) {
            const float go = g[i * out_width + oc[r]];
            float* dr = dx + i * features + rb[r] * block;
            for (std::size_t j = 0; j < block; ++j) dr[j] += go * wv[r * block + j];
          }
      }
      if (wn->requires_grad) {
        float* dw = wn->grad_buffer().raw();
        const float* xv = xn->value.raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t r = 0; r < rows; ++r) {
            const float go = g[i * out_width + oc[r]];
            const float* xr = xv + i * features + rb[r] * block;
            for (std::size_t j = 0; j < block; ++j) dw[r * block + j] += go * xr[j];
          }
      }
      if (bn && bn->requires_grad) {
        float* db = bn->grad_buffer().raw();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t r = 0; r < rows; ++r) db[r] += g[i * out_width + oc[r]];
      }
    });
  }
  return y;
}

Variable softmax_cross_entropy(Tape& tape, const Variable& logits,
                               std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  require_finite(logits.value(), "softmax_cross_entropy");
  Tensor probs({n, c});
  double total = 0.0;
  const float* z = logits.value().raw();
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) +
                       " outside [0, " + std::to_string(c) + ")");
    }
    const float* row = z + i * c;
    const float mx = *std::max_element(row, row + c);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(double(row[j]) - mx);
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = static_cast<float>(std::exp(double(row[j]) - mx) / denom);
    }
    total += std::log(denom) + mx - row[label];
  }
  Variable y(Tensor::scalar(static_cast<float>(total / double(n))),
             logits.requires_grad());
  if (y.requires_grad()) {
    tape.record("softmax_cross_entropy",
                [zn = logits.node(), yn = y.node(), probs = std::move(probs),
                 lab = std::vector<int>(labels.begin(), labels.end()), n, c] {
      if (!yn->has_grad()) return;
      const float g = yn->grad[0] / static_cast<float>(n);
      float* d = zn->grad_buffer().raw();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const float target = static_cast<int>(j) == lab[i] ? 1.0f : 0.0f;
          d[i * c + j] += g * (probs[i * c + j] - target);
        }
      }
    });
  }
  return y;
}

}  // namespace psinet::ad
