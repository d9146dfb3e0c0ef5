#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace elrond {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return s.empty() ? 0 : n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tape;

// Dense row-major tensor of 64-bit reals. Copies are shallow handles onto a
// shared payload; once a tensor is registered on a tape its payload must be
// treated as immutable until backward has run.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : data_(std::make_shared<std::vector<double>>(shape_numel(shape), 0.0)),
        shape_(std::move(shape)) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (values.size() != shape_numel(shape_))
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }

  static Tensor row(std::span<const double> v) {
    return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end()));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }

  std::span<const double> values() const {
    if (!data_) return {};
    return std::span<const double>(*data_);
  }

  std::shared_ptr<const std::vector<double>> shared_values() const { return data_; }

  double value() const {
    if (size() != 1) throw std::invalid_argument("value: tensor is not scalar, shape " + shape_str(shape_));
    return (*data_)[0];
  }

  double operator[](std::size_t i) const { return (*data_)[i]; }

  // Writable view; refused once the tensor is part of a graph.
  std::span<double> mutable_values() {
    if (tape_) throw std::logic_error("mutable_values: tensor is registered on a tape");
    if (!data_) throw std::logic_error("mutable_values: empty tensor");
    return std::span<double>(*data_);
  }

  Tensor clone() const {
    return data_ ? Tensor(shape_, *data_) : Tensor();
  }

  bool requires_grad() const { return requires_grad_; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape;
  std::shared_ptr<std::vector<double>> data_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
  bool requires_grad_ = false;
};

class GradientMap;

// Linear record of every differentiable op in creation order. Creation order
// is a topological order of the graph, so backward is a single reverse sweep
// that visits each record exactly once.
class Tape {
  struct Record;

 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Grads;
  using PullFn = std::function<void(std::span<const double> out_grad, Grads& grads)>;

  Tensor leaf(const Tensor& values) {
    if (values.tape_ != nullptr) throw std::invalid_argument("leaf: tensor already belongs to a tape");
    if (values.size() == 0) throw std::invalid_argument("leaf: empty tensor");
    Tensor t = values;
    t.node_ = add_node(t);
    t.tape_ = this;
    t.requires_grad_ = true;
    leaves_.push_back(t.node_);
    return t;
  }

  Tensor leaf(Shape shape, std::vector<double> values) {
    return leaf(Tensor(std::move(shape), std::move(values)));
  }

  // Adjoint buffers for the inputs of the record being reversed. A null span
  // marks an input that does not participate in differentiation.
  class Grads {
   public:
    std::span<double> of(std::size_t input_index) {
      if (input_index >= rec_->in_nodes.size())
        throw std::out_of_range("Grads::of: input index out of range");
      const int node = rec_->in_nodes[input_index];
      if (node < 0) return {};
      auto& buf = (*acc_)[static_cast<std::size_t>(node)];
      if (buf.empty()) buf.assign(tape_->nodes_[static_cast<std::size_t>(node)].numel, 0.0);
      return std::span<double>(buf);
    }

   private:
    friend class Tape;
    Grads(const Tape* tape, const Record* rec, std::vector<std::vector<double>>* acc)
        : tape_(tape), rec_(rec), acc_(acc) {}
    const Tape* tape_;
    const Record* rec_;
    std::vector<std::vector<double>>* acc_;
  };

  // Registers `result` as `op(inputs...)`. At least one input must already
  // live on this tape. `pull` receives the adjoint of the result and
  // accumulates into the adjoints of the inputs. This is the extension seam:
  // composite ops (set losses, sparse activations) record through here.
  Tensor record(const char* op, const std::vector<Tensor>& inputs, Tensor result, PullFn pull) {
    if (result.tape_ != nullptr) throw std::logic_error("record: result already on a tape");
    Record rec;
    rec.op = op;
    rec.in_nodes.reserve(inputs.size());
    bool any = false;
    for (const Tensor& in : inputs) {
      if (in.tape_ == nullptr) {
        rec.in_nodes.push_back(-1);
        continue;
      }
      if (in.tape_ != this) throw std::invalid_argument("record: input belongs to another tape");
      rec.in_nodes.push_back(in.node_);
      any = true;
    }
    if (!any) throw std::logic_error("record: no input lives on this tape");
    rec.out_node = add_node(result);
    rec.pull = std::move(pull);
    records_.push_back(std::move(rec));
    result.tape_ = this;
    result.node_ = records_.back().out_node;
    result.requires_grad_ = true;
    return result;
  }

  GradientMap backward(const Tensor& root);

  std::size_t record_count() const { return records_.size(); }
  std::size_t leaf_count() const { return leaves_.size(); }

 private:
  friend class GradientMap;

  struct NodeInfo {
    Shape shape;
    std::size_t numel = 0;
  };
  struct Record {
    const char* op = nullptr;
    std::vector<int> in_nodes;
    int out_node = -1;
    PullFn pull;
  };

  int add_node(const Tensor& t) {
    nodes_.push_back({t.shape_, t.size()});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<NodeInfo> nodes_;
  std::vector<Record> records_;
  std::vector<int> leaves_;
};

// Gradients for every leaf of one backward pass. Leaves the root does not
// reach report zeros.
class GradientMap {
 public:
  Tensor grad(const Tensor& leaf) const {
    if (leaf.tape() != tape_) throw std::invalid_argument("grad: tensor is not a leaf of this tape");
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i] == leaf.node()) return grads_[i];
    throw std::invalid_argument("grad: tensor is not a leaf of this tape");
  }

  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<int> nodes_;
  std::vector<Tensor> grads_;
};

inline GradientMap Tape::backward(const Tensor& root) {
  if (root.size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root.shape()));
  if (root.tape_ != nullptr && root.tape_ != this)
    throw std::invalid_argument("backward: root lives on another tape");

  std::vector<std::vector<double>> acc(nodes_.size());
  if (root.tape_ == this) {
    acc[static_cast<std::size_t>(root.node_)].assign(1, 1.0);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      const Record& rec = *it;
      const auto& out_grad = acc[static_cast<std::size_t>(rec.out_node)];
      if (out_grad.empty()) continue;
      Grads grads(this, &rec, &acc);
      rec.pull(std::span<const double>(out_grad), grads);
    }
  }

  GradientMap out;
  out.tape_ = this;
  out.nodes_.reserve(leaves_.size());
  out.grads_.reserve(leaves_.size());
  for (int leaf : leaves_) {
    auto& buf = acc[static_cast<std::size_t>(leaf)];
    const Shape& shape = nodes_[static_cast<std::size_t>(leaf)].shape;
    out.nodes_.push_back(leaf);
    out.grads_.push_back(buf.empty() ? Tensor(shape) : Tensor(shape, std::move(buf)));
  }
  return out;
}

namespace detail {

inline Tape* graph_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    Tape* tt = t->tape();
    if (!tt) continue;
    if (tape && tape != tt) throw std::invalid_argument("operands live on different tapes");
    tape = tt;
  }
  return tape;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// C[m,n] += A[m,k]*B[k,n]. Fixed ikj loop order: row i of C depends only on
// row i of A, so batched and row-at-a-time evaluation agree bit for bit.
inline void gemm_accum(const double* a, const double* b, double* c,
                       std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      const double* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// dA[m,k] += G[m,n]*B^T with B stored [k,n].
inline void gemm_nt_accum(const double* g, const double* b, double* da,
                          std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* di = da + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double* bl = b + l * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bl[j];
      di[l] += s;
    }
  }
}

// dB[k,n] += A^T*G with A stored [m,k].
inline void gemm_tn_accum(const double* a, const double* g, double* db,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      double* dl = db + l * n;
      for (std::size_t j = 0; j < n; ++j) dl[j] += av * gi[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects 2-d operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw std::invalid_argument("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  Tensor out({m, n});
  detail::gemm_accum(a.values().data(), b.values().data(), out.mutable_values().data(), m, k, n);
  Tape* tape = detail::graph_tape({&a, &b});
  if (!tape) return out;
  auto pa = a.shared_values();
  auto pb = b.shared_values();
  return tape->record("matmul", {a, b}, std::move(out),
                      [m, k, n, pa, pb](std::span<const double> g, Tape::Grads& gr) {
                        if (auto da = gr.of(0); !da.empty())
                          detail::gemm_nt_accum(g.data(), pb->data(), da.data(), m, n, k);
                        if (auto db = gr.of(1); !db.empty())
                          detail::gemm_tn_accum(pa->data(), g.data(), db.data(), m, k, n);
                      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  Tensor out(a.shape());
  auto ov = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  Tape* tape = detail::graph_tape({&a, &b});
  if (!tape) return out;
  return tape->record("add", {a, b}, std::move(out),
                      [](std::span<const double> g, Tape::Grads& gr) {
                        if (auto da = gr.of(0); !da.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                        if (auto db = gr.of(1); !db.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto ov = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  Tape* tape = detail::graph_tape({&a, &b});
  if (!tape) return out;
  return tape->record("sub", {a, b}, std::move(out),
                      [](std::span<const double> g, Tape::Grads& gr) {
                        if (auto da = gr.of(0); !da.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                        if (auto db = gr.of(1); !db.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                      });
}

inline Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = c * xv[i];
  Tape* tape = detail::graph_tape({&x});
  if (!tape) return out;
  return tape->record("scale", {x}, std::move(out),
                      [c](std::span<const double> g, Tape::Grads& gr) {
                        if (auto dx = gr.of(0); !dx.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
                      });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("hadamard", a, b);
  Tensor out(a.shape());
  auto ov = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  Tape* tape = detail::graph_tape({&a, &b});
  if (!tape) return out;
  auto pa = a.shared_values();
  auto pb = b.shared_values();
  return tape->record("hadamard", {a, b}, std::move(out),
                      [pa, pb](std::span<const double> g, Tape::Grads& gr) {
                        if (auto da = gr.of(0); !da.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*pb)[i];
                        if (auto db = gr.of(1); !db.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*pa)[i];
                      });
}

inline Tensor silu(const Tensor& x) {
  Tensor out(x.shape());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * detail::sigmoid(xv[i]);
  Tape* tape = detail::graph_tape({&x});
  if (!tape) return out;
  auto px = x.shared_values();
  return tape->record("silu", {x}, std::move(out),
                      [px](std::span<const double> g, Tape::Grads& gr) {
                        auto dx = gr.of(0);
                        if (dx.empty()) return;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double s = detail::sigmoid((*px)[i]);
                          dx[i] += g[i] * (s + (*px)[i] * s * (1.0 - s));
                        }
                      });
}

inline Tensor square(const Tensor& x) {
  Tensor out(x.shape());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * xv[i];
  Tape* tape = detail::graph_tape({&x});
  if (!tape) return out;
  auto px = x.shared_values();
  return tape->record("square", {x}, std::move(out),
                      [px](std::span<const double> g, Tape::Grads& gr) {
                        if (auto dx = gr.of(0); !dx.empty())
                          for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 2.0 * (*px)[i] * g[i];
                      });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  Tape* tape = detail::graph_tape({&x});
  if (!tape) return out;
  return tape->record("sum", {x}, std::move(out),
                      [](std::span<const double> g, Tape::Grads& gr) {
                        if (auto dx = gr.of(0); !dx.empty())
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0];
                      });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv_n = 1.0 / static_cast<double>(x.size());
  Tensor out = Tensor::scalar(s * inv_n);
  Tape* tape = detail::graph_tape({&x});
  if (!tape) return out;
  return tape->record("mean", {x}, std::move(out),
                      [inv_n](std::span<const double> g, Tape::Grads& gr) {
                        if (auto dx = gr.of(0); !dx.empty())
                          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] * inv_n;
                      });
}

// Concatenation along the last axis; ranks 1 and 2 supported, leading dims
// must agree.
inline Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 1 || a.rank() > 2)
    throw std::invalid_argument("concat: ranks must match and be 1 or 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t rows = a.rank() == 2 ? a.shape()[0] : 1;
  if (a.rank() == 2 && b.shape()[0] != rows)
    throw std::invalid_argument("concat: leading dims differ, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t ca = a.shape().back(), cb = b.shape().back();
  Shape out_shape = a.shape();
  out_shape.back() = ca + cb;
  Tensor out(out_shape);
  auto ov = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < ca; ++j) ov[r * (ca + cb) + j] = av[r * ca + j];
    for (std::size_t j = 0; j < cb; ++j) ov[r * (ca + cb) + ca + j] = bv[r * cb + j];
  }
  Tape* tape = detail::graph_tape({&a, &b});
  if (!tape) return out;
  return tape->record("concat", {a, b}, std::move(out),
                      [rows, ca, cb](std::span<const double> g, Tape::Grads& gr) {
                        auto da = gr.of(0);
                        auto db = gr.of(1);
                        for (std::size_t r = 0; r < rows; ++r) {
                          if (!da.empty())
                            for (std::size_t j = 0; j < ca; ++j) da[r * ca + j] += g[r * (ca + cb) + j];
                          if (!db.empty())
                            for (std::size_t j = 0; j < cb; ++j) db[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                      });
}

// Half-open column range [from, to) along the last axis.
inline Tensor slice(const Tensor& x, std::size_t from, std::size_t to) {
  if (x.rank() < 1 || x.rank() > 2)
    throw std::invalid_argument("slice: rank must be 1 or 2, got " + shape_str(x.shape()));
  const std::size_t cols = x.shape().back();
  if (from >= to || to > cols)
    throw std::invalid_argument("slice: bad range [" + std::to_string(from) + ", " +
                                std::to_string(to) + ") for " + shape_str(x.shape()));
  const std::size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
  const std::size_t w = to - from;
  Shape out_shape = x.shape();
  out_shape.back() = w;
  Tensor out(out_shape);
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) ov[r * w + j] = xv[r * cols + from + j];
  Tape* tape = detail::graph_tape({&x});
  if (!tape) return out;
  return tape->record("slice", {x}, std::move(out),
                      [rows, cols, from, w](std::span<const double> g, Tape::Grads& gr) {
                        auto dx = gr.of(0);
                        if (dx.empty()) return;
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < w; ++j) dx[r * cols + from + j] += g[r * w + j];
                      });
}

enum class Primitive {
  kMatmul,
  kAdd,
  kSub,
  kScale,
  kHadamard,
  kSilu,
  kSum,
  kMean,
  kSquare,
  kConcat,
  kSlice,
};

struct PrimitiveArgs {
  double scale = 1.0;
  std::size_t from = 0;
  std::size_t to = 0;
};

inline Tensor eval_primitive(Primitive kind, std::span<const Tensor> in, const PrimitiveArgs& args = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw std::invalid_argument("eval_primitive: expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
  };
  switch (kind) {
    case Primitive::kMatmul: need(2); return matmul(in[0], in[1]);
    case Primitive::kAdd: need(2); return add(in[0], in[1]);
    case Primitive::kSub: need(2); return sub(in[0], in[1]);
    case Primitive::kScale: need(1); return scale(in[0], args.scale);
    case Primitive::kHadamard: need(2); return hadamard(in[0], in[1]);
    case Primitive::kSilu: need(1); return silu(in[0]);
    case Primitive::kSum: need(1); return sum(in[0]);
    case Primitive::kMean: need(1); return mean(in[0]);
    case Primitive::kSquare: need(1); return square(in[0]);
    case Primitive::kConcat: need(2); return concat(in[0], in[1]);
    case Primitive::kSlice: need(1); return slice(in[0], args.from, args.to);
  }
  throw std::invalid_argument("eval_primitive: unknown kind");
}

// Central-difference audit of one backward pass. `build` receives the tape
// and the bound leaf handles (in the order of `leaf_values`) and returns the
// scalar root. Relative error is normalized per leaf by the largest gradient
// magnitude seen on that leaf, floored at 1e-10.
struct GradCheckReport {
  struct Leaf {
    double max_abs_diff = 0.0;
    double scale = 0.0;
    double rel_err = 0.0;
  };
  std::vector<Leaf> leaves;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool ok() const { return max_rel_err <= tol; }
};

inline GradCheckReport grad_check(
    const std::function<Tensor(Tape&, std::span<const Tensor>)>& build,
    const std::vector<Tensor>& leaf_values, double step, double tol) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  auto eval_at = [&](const std::vector<Tensor>& vals) {
    Tape tape;
    std::vector<Tensor> bound;
    bound.reserve(vals.size());
    for (const auto& v : vals) bound.push_back(tape.leaf(v));
    Tensor root = build(tape, bound);
    if (root.size() != 1) throw std::invalid_argument("grad_check: build must return a scalar");
    return root.value();
  };

  Tape tape;
  std::vector<Tensor> bound;
  bound.reserve(leaf_values.size());
  for (const auto& v : leaf_values) bound.push_back(tape.leaf(v));
  Tensor root = build(tape, bound);
  if (root.size() != 1) throw std::invalid_argument("grad_check: build must return a scalar");
  GradientMap grads = tape.backward(root);

  GradCheckReport rep;
  rep.tol = tol;
  for (std::size_t li = 0; li < leaf_values.size(); ++li) {
    const Tensor analytic = grads.grad(bound[li]);
    std::vector<Tensor> work = leaf_values;
    work[li] = leaf_values[li].clone();
    auto pv = work[li].mutable_values();
    GradCheckReport::Leaf lr;
    for (std::size_t c = 0; c < pv.size(); ++c) {
      const double orig = pv[c];
      pv[c] = orig + step;
      const double fp = eval_at(work);
      pv[c] = orig - step;
      const double fm = eval_at(work);
      pv[c] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[c];
      lr.max_abs_diff = std::max(lr.max_abs_diff, std::abs(a - numeric));
      lr.scale = std::max({lr.scale, std::abs(a), std::abs(numeric)});
    }
    lr.rel_err = lr.max_abs_diff / std::max(lr.scale, 1e-10);
    rep.max_rel_err = std::max(rep.max_rel_err, lr.rel_err);
    rep.leaves.push_back(lr);
  }
  return rep;
}

}  // namespace elrond
