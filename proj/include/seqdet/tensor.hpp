#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "seqdet/common.hpp"
#include "seqdet/rng.hpp"

namespace seqdet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ==================== autodiff node ====================

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;        // allocated lazily on first accumulation
  bool requires_grad = false; // leaf flag, set by the caller
  bool tracked = false;       // true when a tape recorded ops involving it

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// ==================== tape ====================

// Records backward closures in forward order while in scope; backward()
// replays them in reverse. One tape per training step. Calling backward a
// second time without re-running the forward pass is an error.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }

  std::size_t size() const { return entries_.size(); }

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  template <typename TensorT>
  void backward(const TensorT& loss) {
    if (consumed_)
      throw ContractError(
          "backward called twice on the same tape; run a new forward pass");
    if (!loss.defined()) throw ContractError("backward on an empty tensor");
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    if (!loss.node()->tracked)
      throw ContractError(
          "loss is not connected to this tape; no recorded op produced it");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (std::size_t i = entries_.size(); i-- > 0;) entries_[i]();
    consumed_ = true;
  }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

// RAII: makes a tape the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) {
    Tape<T>::current() = &tape;
  }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// ==================== tensor handle ====================

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      double mean = 0.0) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.node_->value)
      v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const {
    if (i >= node_->shape.size())
      throw ShapeError("dim index " + std::to_string(i) +
                       " out of range for shape " + shape_str(node_->shape));
    return node_->shape[i];
  }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  const std::vector<T>& data() const { return node_->value; }
  // Direct mutation is for leaves (parameter updates, input staging); mutating
  // an interior graph value between forward and backward corrupts gradients.
  std::vector<T>& mutable_data() { return node_->value; }

  const std::vector<T>& grad() const {
    if (node_->grad.size() != node_->value.size())
      throw ContractError("gradient not populated; run backward first");
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() {
    node_->grad.clear();
    node_->tracked = false;
  }

  void set_requires_grad(bool b) { node_->requires_grad = b; }
  bool requires_grad() const { return node_->requires_grad; }

  T item() const {
    if (numel() != 1)
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    return node_->value[flat_index(idx)];
  }

  const NodePtr<T>& node() const { return node_; }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != node_->shape.size())
      throw ShapeError("index rank mismatch for shape " +
                       shape_str(node_->shape));
    std::size_t flat = 0, i = 0;
    for (std::size_t v : idx) {
      if (v >= node_->shape[i])
        throw ShapeError("index out of range for shape " +
                         shape_str(node_->shape));
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return flat;
  }

  NodePtr<T> node_;
};

// ==================== dump format ====================

// One record: a header line "name shape=[d0,d1,...] dtype=f32\n" followed by
// the row-major payload as little-endian f32. Values are converted to f32 on
// write regardless of T so files compare bytewise across scalar types.
template <typename T>
void dump_tensor(std::ostream& os, const std::string& name,
                 const Tensor<T>& t) {
  os << name << " shape=" << shape_str(t.shape()) << " dtype=f32\n";
  for (T v : t.data()) {
    float f = static_cast<float>(v);
    char buf[4];
    std::memcpy(buf, &f, 4);
    os.write(buf, 4);
  }
}

struct DumpRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline DumpRecord read_dump_record(std::istream& is) {
  std::string header;
  auto at = [&is]() { return std::to_string((long long)is.tellg()); };
  if (!std::getline(is, header))
    throw IoError("tensor record: unexpected end of stream at byte " + at());
  std::size_t sp = header.find(" shape=[");
  std::size_t dt = header.rfind(" dtype=");
  if (sp == std::string::npos || dt == std::string::npos || dt < sp)
    throw IoError("tensor record: malformed header '" + header + "'");
  if (header.substr(dt + 7) != "f32")
    throw IoError("tensor record: unsupported dtype '" + header.substr(dt + 7) +
                  "'");
  DumpRecord rec;
  rec.name = header.substr(0, sp);
  std::string dims = header.substr(sp + 8, dt - sp - 8);
  if (dims.empty() || dims.back() != ']')
    throw IoError("tensor record: malformed shape in '" + header + "'");
  dims.pop_back();
  if (!dims.empty()) {
    std::stringstream ss(dims);
    std::string tok;
    while (std::getline(ss, tok, ','))
      rec.shape.push_back(static_cast<std::size_t>(std::stoull(tok)));
  }
  std::size_t n = shape_numel(rec.shape);
  rec.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[4];
    if (!is.read(buf, 4))
      throw IoError("tensor record '" + rec.name +
                    "': payload truncated at byte " + at());
    float f;
    std::memcpy(&f, buf, 4);
    rec.data[i] = f;
  }
  return rec;
}

}  // namespace seqdet
