#include "tokenrank/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tokenrank/nn/errors.hpp"

namespace tokenrank::nn {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedConst = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMut = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

using BackwardFn = std::function<void(Node&)>;

Var make_result(Tensor value, std::initializer_list<const Var*> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const Var* in : inputs) needs = needs || (in->defined() && in->requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const Var* in : inputs) {
      node->parents.push_back(in->defined() ? in->node() : std::make_shared<Node>());
    }
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

// Gradient buffer of parent `i`, or nullptr when it does not need one.
Tensor* parent_grad(Node& node, std::size_t i) {
  Node& p = *node.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& parent_value(Node& node, std::size_t i) { return node.parents[i]->val(); }

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects rank-2 input, got " + shape_str(t.shape()));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tensor out = nn::matmul(a.value(), b.value());
  return make_result(std::move(out), {&a, &b}, [](Node& n) {
    const Tensor& av = parent_value(n, 0);
    const Tensor& bv = parent_value(n, 1);
    const std::size_t m = av.dim(0);
    const std::size_t k = av.dim(1);
    const std::size_t c = bv.dim(1);
    if (Tensor* ga = parent_grad(n, 0)) gemm_accumulate(n.grad.data(), bv.data(), ga->data(), m, c, k, false, true, false);
    if (Tensor* gb = parent_grad(n, 1)) gemm_accumulate(av.data(), n.grad.data(), gb->data(), k, m, c, true, false, false);
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  Var y = matmul(x, w);
  return bias.defined() ? add_row(y, bias) : y;
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return make_result(std::move(out), {&a, &b}, [](Node& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Tensor* g = parent_grad(n, p)) {
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return make_result(std::move(out), {&a, &b}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return make_result(std::move(out), {&a, &b}, [](Node& n) {
    const Tensor& av = parent_value(n, 0);
    const Tensor& bv = parent_value(n, 1);
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * bv[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, float s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result(std::move(out), {&a}, [s](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += s * n.grad[i];
    }
  });
}

Var add_row(const Var& x, const Var& r) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (r.value().numel() != cols) {
    throw ShapeError("add_row: row of " + shape_str(r.shape()) + " for input " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const Tensor& rv = r.value();
  for (std::size_t i = 0; i < rows; ++i) {
    float* o = out.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) o[j] += rv[j];
  }
  return make_result(std::move(out), {&x, &r}, [rows, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) (*g)[j] += n.grad[i * cols + j];
      }
    }
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  if (s.value().numel() != 1) throw ShapeError("mul_scalar expects a single-element scale, got " + shape_str(s.shape()));
  const float sv = s.value()[0];
  Tensor out = x.value();
  for (auto& v : out.values()) v *= sv;
  return make_result(std::move(out), {&x, &s}, [](Node& n) {
    const Tensor& xv = parent_value(n, 0);
    const float sv = parent_value(n, 1)[0];
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += sv * n.grad[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      float acc = 0.0F;
      for (std::size_t i = 0; i < xv.numel(); ++i) acc += n.grad[i] * xv[i];
      (*g)[0] += acc;
    }
  });
}

Var exp(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::exp(v);
  return make_result(std::move(out), {&x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * n.value[i];
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t d = xv.cols();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw ShapeError("layer_norm: input " + shape_str(xv.shape()) + " with gamma " +
                     shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  Tensor xhat(xv.shape());
  std::vector<float> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * d;
    float mean = 0.0F;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<float>(d);
    float var = 0.0F;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<float>(d);
    const float denom = std::sqrt(var + eps);
    inv_std[r] = denom > 0.0F ? 1.0F / denom : 0.0F;
    float* h = xhat.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) h[j] = (in[j] - mean) * inv_std[r];
  }
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
  }
  return make_result(std::move(out), {&x, &gamma, &beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](Node& n) {
                       const Tensor& gv = parent_value(n, 1);
                       const float inv_d = 1.0F / static_cast<float>(d);
                       if (Tensor* gx = parent_grad(n, 0)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           const float* go = n.grad.data() + r * d;
                           const float* h = xhat.data() + r * d;
                           float mean_g = 0.0F;
                           float mean_gh = 0.0F;
                           for (std::size_t j = 0; j < d; ++j) {
                             const float gy = go[j] * gv[j];
                             mean_g += gy;
                             mean_gh += gy * h[j];
                           }
                           mean_g *= inv_d;
                           mean_gh *= inv_d;
                           float* dst = gx->data() + r * d;
                           for (std::size_t j = 0; j < d; ++j) {
                             dst[j] += inv_std[r] * (go[j] * gv[j] - mean_g - h[j] * mean_gh);
                           }
                         }
                       }
                       if (Tensor* gg = parent_grad(n, 1)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) (*gg)[j] += n.grad[r * d + j] * xhat[r * d + j];
                         }
                       }
                       if (Tensor* gb = parent_grad(n, 2)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) (*gb)[j] += n.grad[r * d + j];
                         }
                       }
                     });
}

Var gelu(const Var& x) {
  Tensor out = nn::gelu(x.value());
  return make_result(std::move(out), {&x}, [](Node& n) {
    const Tensor& xv = parent_value(n, 0);
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * gelu_grad_scalar(xv[i]);
    }
  });
}

Var softmax_rows(const Var& x) {
  Tensor out = nn::softmax(x.value(), x.value().rank() - 1);
  return make_result(std::move(out), {&x}, [](Node& n) {
    Tensor* g = parent_grad(n, 0);
    if (g == nullptr) return;
    const std::size_t rows = n.value.rows();
    const std::size_t cols = n.value.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = n.value.data() + r * cols;
      const float* go = n.grad.data() + r * cols;
      float dot = 0.0F;
      for (std::size_t j = 0; j < cols; ++j) dot += go[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += y[j] * (go[j] - dot);
    }
  });
}

Var log_softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * cols;
    float mx = in[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    float total = 0.0F;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(in[j] - mx);
    const float lse = mx + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = in[j] - lse;
  }
  return make_result(std::move(out), {&x}, [rows, cols](Node& n) {
    Tensor* g = parent_grad(n, 0);
    if (g == nullptr) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* go = n.grad.data() + r * cols;
      float total = 0.0F;
      for (std::size_t j = 0; j < cols; ++j) total += go[j];
      for (std::size_t j = 0; j < cols; ++j) {
        (*g)[r * cols + j] += go[j] - std::exp(n.value[r * cols + j]) * total;
      }
    }
  });
}

Var log_sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::min(v, 0.0F) - std::log1p(std::exp(-std::fabs(v)));
  return make_result(std::move(out), {&x}, [](Node& n) {
    const Tensor& xv = parent_value(n, 0);
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        const float v = xv[i];
        const float sig_neg = v >= 0.0F ? std::exp(-v) / (1.0F + std::exp(-v)) : 1.0F / (1.0F + std::exp(v));
        (*g)[i] += n.grad[i] * sig_neg;
      }
    }
  });
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  require_rank2("transpose", xv);
  const std::size_t r = xv.dim(0);
  const std::size_t c = xv.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  }
  return make_result(std::move(out), {&x}, [r, c](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += n.grad[j * r + i];
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {&x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
  });
}

Var gather_rows(const Var& x, const std::vector<std::size_t>& ids) {
  const Tensor& xv = x.value();
  const bool vec = xv.rank() == 1;
  if (!vec) require_rank2("gather_rows", xv);
  const std::size_t rows = vec ? xv.dim(0) : xv.dim(0);
  const std::size_t cols = vec ? 1 : xv.dim(1);
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  for (auto id : ids) {
    if (id >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(id) + " out of range for " + shape_str(xv.shape()));
    }
  }
  Tensor out(vec ? Shape{ids.size()} : Shape{ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(xv.data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  return make_result(std::move(out), {&x}, [ids, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        float* dst = g->data() + ids[i] * cols;
        const float* src = n.grad.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
      }
    }
  });
}

Var submatrix(const Var& x, const std::vector<std::size_t>& row_ids, const std::vector<std::size_t>& col_ids) {
  const Tensor& xv = x.value();
  require_rank2("submatrix", xv);
  const std::size_t cols = xv.dim(1);
  for (auto id : row_ids) {
    if (id >= xv.dim(0)) throw ShapeError("submatrix: row index out of range");
  }
  for (auto id : col_ids) {
    if (id >= cols) throw ShapeError("submatrix: column index out of range");
  }
  Tensor out({row_ids.size(), col_ids.size()});
  for (std::size_t i = 0; i < row_ids.size(); ++i) {
    for (std::size_t j = 0; j < col_ids.size(); ++j) out[i * col_ids.size() + j] = xv[row_ids[i] * cols + col_ids[j]];
  }
  return make_result(std::move(out), {&x}, [row_ids, col_ids, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < row_ids.size(); ++i) {
        for (std::size_t j = 0; j < col_ids.size(); ++j) {
          (*g)[row_ids[i] * cols + col_ids[j]] += n.grad[i * col_ids.size() + j];
        }
      }
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().value().cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    if (v.cols() != cols) {
      throw ShapeError("concat_rows: width mismatch " + shape_str(parts.front().shape()) + " vs " + shape_str(v.shape()));
    }
    offsets.push_back(total);
    total += v.rows();
  }
  Tensor out({total, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    std::copy_n(v.data(), v.numel(), out.data() + offsets[i] * cols);
  }

  auto node = std::make_shared<Node>();
  node->value = std::move(out);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parts) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [offsets, cols](Node& n) {
      for (std::size_t i = 0; i < n.parents.size(); ++i) {
        if (Tensor* g = parent_grad(n, i)) {
          const float* src = n.grad.data() + offsets[i] * cols;
          for (std::size_t k = 0; k < g->numel(); ++k) (*g)[k] += src[k];
        }
      }
    };
  }
  return Var(std::move(node));
}

Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank2("slice_rows", xv);
  if (count == 0 || start + count > xv.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_str(xv.shape()));
  }
  const std::size_t cols = xv.dim(1);
  Tensor out({count, cols});
  std::copy_n(xv.data() + start * cols, count * cols, out.data());
  return make_result(std::move(out), {&x}, [start, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      float* dst = g->data() + start * cols;
      for (std::size_t k = 0; k < n.grad.numel(); ++k) dst[k] += n.grad[k];
    }
  });
}

Var mean_cols(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    float acc = 0.0F;
    for (std::size_t j = 0; j < cols; ++j) acc += xv[r * cols + j];
    out[r] = acc / static_cast<float>(cols);
  }
  return make_result(std::move(out), {&x}, [rows, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      const float inv = 1.0F / static_cast<float>(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += n.grad[r] * inv;
      }
    }
  });
}

Var sum(const Var& x) {
  float acc = 0.0F;
  for (float v : x.value().values()) acc += v;
  return make_result(Tensor::scalar(acc), {&x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[0];
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  Tensor out(xv.shape());
  std::vector<float> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    float sq = 0.0F;
    for (std::size_t j = 0; j < cols; ++j) sq += xv[r * cols + j] * xv[r * cols + j];
    norms[r] = std::sqrt(sq);
    if (!(norms[r] > 0.0F) || !std::isfinite(norms[r])) {
      throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has norm " + std::to_string(norms[r]) +
                         " (input " + shape_str(xv.shape()) + ")");
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = xv[r * cols + j] / norms[r];
  }
  return make_result(std::move(out), {&x}, [norms = std::move(norms), rows, cols](Node& n) {
    Tensor* g = parent_grad(n, 0);
    if (g == nullptr) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = n.value.data() + r * cols;
      const float* go = n.grad.data() + r * cols;
      float dot = 0.0F;
      for (std::size_t j = 0; j < cols; ++j) dot += go[j] * y[j];
      for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += (go[j] - y[j] * dot) / norms[r];
    }
  });
}

Var pick(const Var& x, const std::vector<std::size_t>& cols_idx) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (cols_idx.size() != rows) throw ShapeError("pick: need one column index per row");
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols_idx[r] >= cols) throw ShapeError("pick: column index out of range");
    out[r] = xv[r * cols + cols_idx[r]];
  }
  return make_result(std::move(out), {&x}, [cols_idx, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t r = 0; r < cols_idx.size(); ++r) (*g)[r * cols + cols_idx[r]] += n.grad[r];
    }
  });
}

Var attention(const Var& qkv, std::size_t batch, std::size_t len, std::size_t heads, bool causal, Tensor* cls_probs) {
  const Tensor& in = qkv.value();
  require_rank2("attention", in);
  if (in.dim(0) != batch * len || in.dim(1) % 3 != 0) {
    throw ShapeError("attention: qkv " + shape_str(in.shape()) + " incompatible with batch " + std::to_string(batch) +
                     " x len " + std::to_string(len));
  }
  const std::size_t d = in.dim(1) / 3;
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width " + std::to_string(d) + " not divisible by heads");
  const std::size_t dh = d / heads;
  const float inv_sqrt = 1.0F / std::sqrt(static_cast<float>(dh));
  const auto n = static_cast<Eigen::Index>(len);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));

  const bool keep_probs = grad_enabled() && qkv.requires_grad();
  auto probs = std::make_shared<std::vector<float>>(keep_probs ? batch * heads * len * len : 0);
  if (cls_probs != nullptr) *cls_probs = Tensor({batch, len});

  Tensor out({batch * len, d});
  RowMat scores(n, n);
  for (std::size_t b = 0; b < batch; ++b) {
    const float* base = in.data() + b * len * 3 * d;
    for (std::size_t h = 0; h < heads; ++h) {
      StridedConst q(base + h * dh, n, dhi, in_stride);
      StridedConst k(base + d + h * dh, n, dhi, in_stride);
      StridedConst v(base + 2 * d + h * dh, n, dhi, in_stride);
      scores.noalias() = q * k.transpose();
      scores *= inv_sqrt;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index limit = causal ? i + 1 : n;
        float mx = scores(i, 0);
        for (Eigen::Index j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
        float total = 0.0F;
        for (Eigen::Index j = 0; j < limit; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          total += scores(i, j);
        }
        for (Eigen::Index j = 0; j < limit; ++j) scores(i, j) /= total;
        for (Eigen::Index j = limit; j < n; ++j) scores(i, j) = 0.0F;
      }
      StridedMut o(out.data() + b * len * d + h * dh, n, dhi, out_stride);
      o.noalias() = scores * v;
      if (keep_probs) {
        std::copy_n(scores.data(), len * len, probs->data() + (b * heads + h) * len * len);
      }
      if (cls_probs != nullptr) {
        for (std::size_t j = 0; j < len; ++j) {
          cls_probs->at(b, j) += scores(0, static_cast<Eigen::Index>(j)) / static_cast<float>(heads);
        }
      }
    }
  }
  mac_counter() += static_cast<std::uint64_t>(batch) * 2 * len * len * d;

  return make_result(std::move(out), {&qkv}, [probs, batch, len, heads, d, dh, inv_sqrt](Node& nd) {
    Tensor* g = parent_grad(nd, 0);
    if (g == nullptr) return;
    const Tensor& in = parent_value(nd, 0);
    const auto n = static_cast<Eigen::Index>(len);
    const auto dhi = static_cast<Eigen::Index>(dh);
    const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
    const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));
    RowMat dp(n, n);
    for (std::size_t b = 0; b < batch; ++b) {
      const float* base = in.data() + b * len * 3 * d;
      float* gbase = g->data() + b * len * 3 * d;
      for (std::size_t h = 0; h < heads; ++h) {
        Eigen::Map<const RowMat> p(probs->data() + (b * heads + h) * len * len, n, n);
        StridedConst q(base + h * dh, n, dhi, in_stride);
        StridedConst k(base + d + h * dh, n, dhi, in_stride);
        StridedConst v(base + 2 * d + h * dh, n, dhi, in_stride);
        StridedConst go(nd.grad.data() + b * len * d + h * dh, n, dhi, out_stride);
        StridedMut gq(gbase + h * dh, n, dhi, in_stride);
        StridedMut gk(gbase + d + h * dh, n, dhi, in_stride);
        StridedMut gv(gbase + 2 * d + h * dh, n, dhi, in_stride);
        gv.noalias() += p.transpose() * go;
        dp.noalias() = go * v.transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
          float dot = 0.0F;
          for (Eigen::Index j = 0; j < n; ++j) dot += dp(i, j) * p(i, j);
          for (Eigen::Index j = 0; j < n; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
        }
        gq.noalias() += dp * k;
        gk.noalias() += dp.transpose() * q;
      }
    }
  });
}

}  // namespace tokenrank::nn
