#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "primgen/errors.hpp"

namespace primgen::nn {

using Mat = Eigen::MatrixXd;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  int index = -1;
};

class ParamStore {
 public:
  Parameter& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

/// Per-worker gradient accumulator, reduced into ParamStore grads in a fixed
/// order so results do not depend on thread scheduling.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamStore& store) : store_(&store), grads_(store.all().size()) {}
  void accumulate(int param_index, const Mat& g);
  void add_into_store(ParamStore& store, double scale) const;
  void clear();

 private:
  const ParamStore* store_;
  std::vector<Mat> grads_;  // empty = untouched
};

/// Append-only reverse-mode autodiff tape over dense double matrices.
/// Row-vector convention: a batch of m items with feature width c is m x c.
class Tape {
 public:
  explicit Tape(GradBuffer* sink = nullptr) : sink_(sink) {}

  Var constant(Mat v);
  Var param(const Parameter& p);

  const Mat& value(Var v) const { return node(v.id).value; }
  const Mat& grad(Var v) const;

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var cmul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_rowvec(Var a, Var row);
  Var concat_cols(const std::vector<Var>& parts);
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_cols(Var a, int c0, int n);
  Var slice_rows(Var a, int r0, int n);
  Var gather_rows(Var table, std::vector<int> idx);
  Var softmax_rows(Var a);
  Var masked_softmax_rows(Var a, const Mat& additive_mask);
  Var layer_norm_rows(Var a, Var gain, Var bias);
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var weighted_sum(const std::vector<std::pair<double, Var>>& terms);
  Var cross_entropy_sum(Var logits, std::vector<int> targets);
  Var bce_with_logits_sum(Var logits, Mat targets);
  /// softmax((logits + noise) / temperature); with hard=true the forward value
  /// is the one-hot argmax while gradients flow through the soft sample.
  Var gumbel_softmax(Var logits_row, double temperature, const Mat& noise, bool hard);
  /// rows of `local` mapped through R(rot) * diag(scale) * x + trans;
  /// scale/rot/trans are 1x3.
  Var transform_points(Mat local, Var scale3, Var rot3, Var trans3);
  /// symmetric chamfer distance (mean squared nearest-neighbor, both ways)
  /// between variable pred rows and constant gt rows; scalar output.
  Var chamfer(Var pred, Mat gt);

  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> backprop;  // may be empty for leaves/constants
    int param_index = -1;
  };

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  Mat& g(int id) { return nodes_[id].grad; }
  const Mat& v(int id) const { return nodes_[id].value; }
  Var push(Mat value, std::function<void()> backprop = {});
  void check_same_shape(Var a, Var b, const char* op) const;

  std::vector<Node> nodes_;
  GradBuffer* sink_ = nullptr;
};

}  // namespace primgen::nn
