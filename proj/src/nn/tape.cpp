#include "primgen/nn/tape.hpp"

#include <cmath>

namespace primgen::nn {

namespace {
constexpr double kLnEps = 1e-5;  // layer norm variance epsilon
}

Parameter& ParamStore::create(const std::string& name, Eigen::Index rows,
                              Eigen::Index cols) {
  if (find(name)) fail(ErrorKind::contract_violation, "duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  p->index = int(params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += std::size_t(p->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

void GradBuffer::accumulate(int param_index, const Mat& g) {
  Mat& slot = grads_[param_index];
  if (slot.size() == 0)
    slot = g;
  else
    slot += g;
}

void GradBuffer::add_into_store(ParamStore& store, double scale) const {
  for (std::size_t i = 0; i < grads_.size(); ++i)
    if (grads_[i].size() != 0) store.all()[i]->grad += scale * grads_[i];
}

void GradBuffer::clear() {
  for (Mat& g : grads_) g.resize(0, 0);
}

Var Tape::push(Mat value, std::function<void()> backprop) {
  Node n;
  n.value = std::move(value);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{int(nodes_.size()) - 1};
}

const Mat& Tape::grad(Var v) const {
  const Node& n = node(v.id);
  if (n.grad.size() == 0)
    fail(ErrorKind::contract_violation, "gradient not computed; call backward first");
  return n.grad;
}

void Tape::check_same_shape(Var a, Var b, const char* op) const {
  if (v(a.id).rows() != v(b.id).rows() || v(a.id).cols() != v(b.id).cols())
    fail(ErrorKind::contract_violation, std::string(op) + ": shape mismatch");
}

Var Tape::constant(Mat m) { return push(std::move(m)); }

Var Tape::param(const Parameter& p) {
  Var out = push(p.value);
  nodes_.back().param_index = p.index;
  return out;
}

Var Tape::matmul(Var a, Var b) {
  if (v(a.id).cols() != v(b.id).rows())
    fail(ErrorKind::contract_violation, "matmul: inner dimension mismatch");
  Var out = push(v(a.id) * v(b.id));
  nodes_.back().backprop = [this, a, b, out] {
    g(a.id).noalias() += g(out.id) * v(b.id).transpose();
    g(b.id).noalias() += v(a.id).transpose() * g(out.id);
  };
  return out;
}

Var Tape::matmul_nt(Var a, Var b) {
  if (v(a.id).cols() != v(b.id).cols())
    fail(ErrorKind::contract_violation, "matmul_nt: inner dimension mismatch");
  Var out = push(v(a.id) * v(b.id).transpose());
  nodes_.back().backprop = [this, a, b, out] {
    g(a.id).noalias() += g(out.id) * v(b.id);
    g(b.id).noalias() += g(out.id).transpose() * v(a.id);
  };
  return out;
}

Var Tape::add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Var out = push(v(a.id) + v(b.id));
  nodes_.back().backprop = [this, a, b, out] {
    g(a.id) += g(out.id);
    g(b.id) += g(out.id);
  };
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Var out = push(v(a.id) - v(b.id));
  nodes_.back().backprop = [this, a, b, out] {
    g(a.id) += g(out.id);
    g(b.id) -= g(out.id);
  };
  return out;
}

Var Tape::cmul(Var a, Var b) {
  check_same_shape(a, b, "cmul");
  Var out = push(v(a.id).cwiseProduct(v(b.id)));
  nodes_.back().backprop = [this, a, b, out] {
    g(a.id) += g(out.id).cwiseProduct(v(b.id));
    g(b.id) += g(out.id).cwiseProduct(v(a.id));
  };
  return out;
}

Var Tape::scale(Var a, double s) {
  Var out = push(v(a.id) * s);
  nodes_.back().backprop = [this, a, out, s] { g(a.id) += s * g(out.id); };
  return out;
}

Var Tape::add_rowvec(Var a, Var row) {
  if (v(row.id).rows() != 1 || v(row.id).cols() != v(a.id).cols())
    fail(ErrorKind::contract_violation, "add_rowvec: row must be 1 x cols(a)");
  Mat out_v = v(a.id);
  out_v.rowwise() += v(row.id).row(0);
  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, a, row, out] {
    g(a.id) += g(out.id);
    g(row.id) += g(out.id).colwise().sum();
  };
  return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::contract_violation, "concat_cols: empty");
  const Eigen::Index rows = v(parts[0].id).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (v(p.id).rows() != rows)
      fail(ErrorKind::contract_violation, "concat_cols: row mismatch");
    cols += v(p.id).cols();
  }
  Mat out_v(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out_v.middleCols(c, v(p.id).cols()) = v(p.id);
    c += v(p.id).cols();
  }
  Var out = push(std::move(out_v));
  std::vector<Var> copy = parts;
  nodes_.back().backprop = [this, copy, out] {
    Eigen::Index c = 0;
    for (Var p : copy) {
      g(p.id) += g(out.id).middleCols(c, v(p.id).cols());
      c += v(p.id).cols();
    }
  };
  return out;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::contract_violation, "concat_rows: empty");
  const Eigen::Index cols = v(parts[0].id).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (v(p.id).cols() != cols)
      fail(ErrorKind::contract_violation, "concat_rows: column mismatch");
    rows += v(p.id).rows();
  }
  Mat out_v(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out_v.middleRows(r, v(p.id).rows()) = v(p.id);
    r += v(p.id).rows();
  }
  Var out = push(std::move(out_v));
  std::vector<Var> copy = parts;
  nodes_.back().backprop = [this, copy, out] {
    Eigen::Index r = 0;
    for (Var p : copy) {
      g(p.id) += g(out.id).middleRows(r, v(p.id).rows());
      r += v(p.id).rows();
    }
  };
  return out;
}

Var Tape::slice_cols(Var a, int c0, int n) {
  if (c0 < 0 || c0 + n > v(a.id).cols())
    fail(ErrorKind::contract_violation, "slice_cols: out of range");
  Var out = push(v(a.id).middleCols(c0, n));
  nodes_.back().backprop = [this, a, out, c0, n] {
    g(a.id).middleCols(c0, n) += g(out.id);
  };
  return out;
}

Var Tape::slice_rows(Var a, int r0, int n) {
  if (r0 < 0 || r0 + n > v(a.id).rows())
    fail(ErrorKind::contract_violation, "slice_rows: out of range");
  Var out = push(v(a.id).middleRows(r0, n));
  nodes_.back().backprop = [this, a, out, r0, n] {
    g(a.id).middleRows(r0, n) += g(out.id);
  };
  return out;
}

Var Tape::gather_rows(Var table, std::vector<int> idx) {
  Mat out_v(Eigen::Index(idx.size()), v(table.id).cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= v(table.id).rows())
      fail(ErrorKind::invalid_input, "gather_rows: index out of range");
    out_v.row(Eigen::Index(i)) = v(table.id).row(idx[i]);
  }
  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, table, out, idx = std::move(idx)] {
    for (std::size_t i = 0; i < idx.size(); ++i)
      g(table.id).row(idx[i]) += g(out.id).row(Eigen::Index(i));
  };
  return out;
}

Var Tape::softmax_rows(Var a) { return masked_softmax_rows(a, Mat()); }

Var Tape::masked_softmax_rows(Var a, const Mat& additive_mask) {
  Mat z = v(a.id);
  if (additive_mask.size() != 0) {
    if (additive_mask.rows() != z.rows() || additive_mask.cols() != z.cols())
      fail(ErrorKind::contract_violation, "masked_softmax: mask shape mismatch");
    z += additive_mask;
  }
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - m).exp();
    z.row(r) /= z.row(r).sum();
  }
  Var out = push(std::move(z));
  nodes_.back().backprop = [this, a, out] {
    const Mat& y = v(out.id);
    const Mat& gy = g(out.id);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = gy.row(r).dot(y.row(r));
      g(a.id).row(r) += (gy.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
    }
  };
  return out;
}

Var Tape::layer_norm_rows(Var a, Var gain, Var bias) {
  const Mat& x = v(a.id);
  const Eigen::Index c = x.cols();
  if (v(gain.id).rows() != 1 || v(gain.id).cols() != c || v(bias.id).rows() != 1 ||
      v(bias.id).cols() != c)
    fail(ErrorKind::contract_violation, "layer_norm: gain/bias must be 1 x cols");
  Mat xhat(x.rows(), c);
  Mat inv_std(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r, 0) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = ((x.row(r).array() - mu) * inv_std(r, 0)).matrix();
  }
  Mat out_v = xhat;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    out_v.row(r) = out_v.row(r).cwiseProduct(v(gain.id).row(0)) + v(bias.id).row(0);
  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, a, gain, bias, out, xhat = std::move(xhat),
                            inv_std = std::move(inv_std)] {
    const Mat& gy = g(out.id);
    g(bias.id) += gy.colwise().sum();
    g(gain.id) += gy.cwiseProduct(xhat).colwise().sum();
    for (Eigen::Index r = 0; r < gy.rows(); ++r) {
      const Eigen::RowVectorXd gxhat = gy.row(r).cwiseProduct(v(gain.id).row(0));
      const double mean_g = gxhat.mean();
      const double mean_gx = gxhat.cwiseProduct(xhat.row(r)).mean();
      g(a.id).row(r) +=
          (inv_std(r, 0) *
           (gxhat.array() - mean_g - xhat.row(r).array() * mean_gx))
              .matrix();
    }
  };
  return out;
}

Var Tape::gelu(Var a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  Mat out_v = v(a.id).unaryExpr(
      [](double t) { return 0.5 * t * (1.0 + std::erf(t * inv_sqrt2)); });
  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, a, out] {
    const Mat deriv = v(a.id).unaryExpr([](double t) {
      const double phi = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
      const double pdf = std::exp(-0.5 * t * t) * 0.3989422804014327;
      return phi + t * pdf;
    });
    g(a.id) += g(out.id).cwiseProduct(deriv);
  };
  return out;
}

Var Tape::sigmoid(Var a) {
  Mat out_v = v(a.id).unaryExpr([](double t) { return 1.0 / (1.0 + std::exp(-t)); });
  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, a, out] {
    const Mat& y = v(out.id);
    g(a.id) += g(out.id).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
  };
  return out;
}

Var Tape::sum(Var a) {
  Var out = push(Mat::Constant(1, 1, v(a.id).sum()));
  nodes_.back().backprop = [this, a, out] { g(a.id).array() += g(out.id)(0, 0); };
  return out;
}

Var Tape::mean(Var a) {
  const double n = double(v(a.id).size());
  Var out = push(Mat::Constant(1, 1, v(a.id).sum() / n));
  nodes_.back().backprop = [this, a, out, n] {
    g(a.id).array() += g(out.id)(0, 0) / n;
  };
  return out;
}

Var Tape::weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
  double total = 0.0;
  for (const auto& [w, t] : terms) {
    if (v(t.id).size() != 1)
      fail(ErrorKind::contract_violation, "weighted_sum: terms must be scalars");
    total += w * v(t.id)(0, 0);
  }
  Var out = push(Mat::Constant(1, 1, total));
  std::vector<std::pair<double, Var>> copy = terms;
  nodes_.back().backprop = [this, copy, out] {
    for (const auto& [w, t] : copy) g(t.id)(0, 0) += w * g(out.id)(0, 0);
  };
  return out;
}

Var Tape::cross_entropy_sum(Var logits, std::vector<int> targets) {
  const Mat& x = v(logits.id);
  if (Eigen::Index(targets.size()) != x.rows())
    fail(ErrorKind::contract_violation, "cross_entropy: one target per row");
  Mat probs(x.rows(), x.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (targets[r] < 0 || targets[r] >= x.cols())
      fail(ErrorKind::invalid_input, "cross_entropy: target out of range");
    const double m = x.row(r).maxCoeff();
    const Eigen::ArrayXd e = (x.row(r).array() - m).exp().transpose();
    const double z = e.sum();
    probs.row(r) = (e / z).matrix().transpose();
    loss += m + std::log(z) - x(r, targets[r]);
  }
  Var out = push(Mat::Constant(1, 1, loss));
  nodes_.back().backprop = [this, logits, out, probs = std::move(probs),
                            targets = std::move(targets)] {
    const double go = g(out.id)(0, 0);
    Mat gx = probs;
    for (Eigen::Index r = 0; r < gx.rows(); ++r) gx(r, targets[r]) -= 1.0;
    g(logits.id) += go * gx;
  };
  return out;
}

Var Tape::bce_with_logits_sum(Var logits, Mat targets) {
  const Mat& x = v(logits.id);
  if (x.rows() != targets.rows() || x.cols() != targets.cols())
    fail(ErrorKind::contract_violation, "bce: target shape mismatch");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x(i);
    loss += std::max(xi, 0.0) - xi * targets(i) + std::log1p(std::exp(-std::abs(xi)));
  }
  Var out = push(Mat::Constant(1, 1, loss));
  nodes_.back().backprop = [this, logits, out, targets = std::move(targets)] {
    const double go = g(out.id)(0, 0);
    const Mat sig =
        v(logits.id).unaryExpr([](double t) { return 1.0 / (1.0 + std::exp(-t)); });
    g(logits.id) += go * (sig - targets);
  };
  return out;
}

Var Tape::gumbel_softmax(Var logits_row, double temperature, const Mat& noise,
                         bool hard) {
  if (temperature <= 0.0)
    fail(ErrorKind::invalid_input, "gumbel_softmax: temperature must be positive");
  const Mat& x = v(logits_row.id);
  if (x.rows() != 1)
    fail(ErrorKind::contract_violation, "gumbel_softmax: expects a single row");
  if (noise.rows() != 1 || noise.cols() != x.cols())
    fail(ErrorKind::contract_violation, "gumbel_softmax: noise shape mismatch");

  Mat z = (x + noise) / temperature;
  const double m = z.row(0).maxCoeff();
  Mat soft = (z.row(0).array() - m).exp().matrix();
  soft /= soft.sum();

  Mat out_v;
  if (hard) {
    Eigen::Index argmax = 0;
    z.row(0).maxCoeff(&argmax);
    out_v = Mat::Zero(1, x.cols());
    out_v(0, argmax) = 1.0;
  } else {
    out_v = soft;
  }
  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, logits_row, out, soft = std::move(soft),
                            temperature] {
    const Mat& gy = g(out.id);
    const double dot = gy.row(0).dot(soft.row(0));
    g(logits_row.id).row(0) +=
        ((gy.row(0).array() - dot) * soft.row(0).array() / temperature).matrix();
  };
  return out;
}

namespace {

Eigen::Matrix3d rot_axis(int axis, double angle) {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  const double c = std::cos(angle), s = std::sin(angle);
  const int i = (axis + 1) % 3, j = (axis + 2) % 3;
  r(i, i) = c;
  r(i, j) = -s;
  r(j, i) = s;
  r(j, j) = c;
  return r;
}

Eigen::Matrix3d drot_axis(int axis, double angle) {
  Eigen::Matrix3d r = Eigen::Matrix3d::Zero();
  const double c = std::cos(angle), s = std::sin(angle);
  const int i = (axis + 1) % 3, j = (axis + 2) % 3;
  r(i, i) = -s;
  r(i, j) = -c;
  r(j, i) = c;
  r(j, j) = -s;
  return r;
}

}  // namespace

Var Tape::transform_points(Mat local, Var scale3, Var rot3, Var trans3) {
  for (Var p : {scale3, rot3, trans3})
    if (v(p.id).rows() != 1 || v(p.id).cols() != 3)
      fail(ErrorKind::contract_violation, "transform_points: params must be 1x3");
  const Eigen::RowVector3d s = v(scale3.id).row(0);
  const Eigen::RowVector3d r = v(rot3.id).row(0);
  const Eigen::RowVector3d t = v(trans3.id).row(0);

  const Eigen::Matrix3d rx = rot_axis(0, r(0));
  const Eigen::Matrix3d ry = rot_axis(1, r(1));
  const Eigen::Matrix3d rz = rot_axis(2, r(2));
  const Eigen::Matrix3d rot = rz * ry * rx;

  // rows: Y = X diag(s) R^T + 1 t
  Mat out_v = local * s.asDiagonal() * rot.transpose();
  out_v.rowwise() += t;

  const Eigen::Matrix3d d0 = rz * ry * drot_axis(0, r(0));
  const Eigen::Matrix3d d1 = rz * drot_axis(1, r(1)) * rx;
  const Eigen::Matrix3d d2 = drot_axis(2, r(2)) * ry * rx;

  Var out = push(std::move(out_v));
  nodes_.back().backprop = [this, scale3, rot3, trans3, out,
                            local = std::move(local), s, rot, d0, d1, d2] {
    const Mat& gy = g(out.id);
    g(trans3.id).row(0) += gy.colwise().sum();
    for (int j = 0; j < 3; ++j)
      g(scale3.id)(0, j) += (gy * rot.col(j)).col(0).dot(local.col(j));
    const Eigen::Matrix3d grot = gy.transpose() * local * s.asDiagonal();
    g(rot3.id)(0, 0) += grot.cwiseProduct(d0).sum();
    g(rot3.id)(0, 1) += grot.cwiseProduct(d1).sum();
    g(rot3.id)(0, 2) += grot.cwiseProduct(d2).sum();
  };
  return out;
}

Var Tape::chamfer(Var pred, Mat gt) {
  const Mat& p = v(pred.id);
  if (p.cols() != 3 || gt.cols() != 3)
    fail(ErrorKind::contract_violation, "chamfer: point sets must be N x 3");
  if (p.rows() == 0 || gt.rows() == 0)
    fail(ErrorKind::invalid_input, "chamfer: empty point set");

  const Eigen::Index np = p.rows(), nq = gt.rows();
  std::vector<Eigen::Index> nn_pq(np), nn_qp(nq);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < np; ++i) {
    Eigen::Index best = 0;
    (gt.rowwise() - p.row(i)).rowwise().squaredNorm().minCoeff(&best);
    nn_pq[i] = best;
    loss += (p.row(i) - gt.row(best)).squaredNorm() / double(np);
  }
  for (Eigen::Index j = 0; j < nq; ++j) {
    Eigen::Index best = 0;
    (p.rowwise() - gt.row(j)).rowwise().squaredNorm().minCoeff(&best);
    nn_qp[j] = best;
    loss += (gt.row(j) - p.row(best)).squaredNorm() / double(nq);
  }
  Var out = push(Mat::Constant(1, 1, loss));
  nodes_.back().backprop = [this, pred, out, gt = std::move(gt),
                            nn_pq = std::move(nn_pq), nn_qp = std::move(nn_qp)] {
    const double go = g(out.id)(0, 0);
    const Mat& p = v(pred.id);
    const double np = double(p.rows()), nq = double(gt.rows());
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      g(pred.id).row(i) += go * (2.0 / np) * (p.row(i) - gt.row(nn_pq[i]));
    for (Eigen::Index j = 0; j < gt.rows(); ++j)
      g(pred.id).row(nn_qp[j]) += go * (2.0 / nq) * (p.row(nn_qp[j]) - gt.row(j));
  };
  return out;
}

void Tape::backward(Var loss) {
  if (v(loss.id).size() != 1)
    fail(ErrorKind::contract_violation, "backward: loss must be scalar");
  for (Node& n : nodes_) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backprop) n.backprop();
    if (n.param_index >= 0 && sink_) sink_->accumulate(n.param_index, n.grad);
  }
}

}  // namespace primgen::nn
