#include <doctest.h>

#include <cmath>

#include "primgen/common.hpp"
#include "primgen/nn/optim.hpp"
#include "primgen/nn/tape.hpp"

using namespace primgen;
using namespace primgen::nn;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = dist(rng);
  return m;
}

// finite-difference check of d(loss)/d(x) for a tape-built scalar loss
template <typename BuildFn>
void check_input_gradient(const Mat& x0, BuildFn build, double tol = 1e-6,
                          double eps = 1e-5) {
  Tape tape;
  Var x = tape.constant(x0);
  Var loss = build(tape, x);
  tape.backward(loss);
  const Mat g = tape.grad(x);

  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Mat xp = x0, xm = x0;
    xp(i) += eps;
    xm(i) -= eps;
    Tape tp, tm;
    const double fp = tp.value(build(tp, tp.constant(xp)))(0, 0);
    const double fm = tm.value(build(tm, tm.constant(xm)))(0, 0);
    const double fd = (fp - fm) / (2.0 * eps);
    CHECK(std::abs(g(i) - fd) <= tol * std::max(1.0, std::abs(fd)));
  }
}

}  // namespace

TEST_CASE("gradient: matmul / add / bias chain") {
  Rng rng(101);
  const Mat a = random_mat(4, 5, rng);
  const Mat w = random_mat(5, 3, rng);
  const Mat b = random_mat(1, 3, rng);
  check_input_gradient(a, [&](Tape& t, Var x) {
    Var wv = t.constant(w);
    Var bv = t.constant(b);
    return t.sum(t.add_rowvec(t.matmul(x, wv), bv));
  });
  check_input_gradient(w, [&](Tape& t, Var x) {
    Var av = t.constant(a);
    return t.mean(t.matmul(av, x));
  });
}

TEST_CASE("gradient: matmul_nt, cmul, sub, scale") {
  Rng rng(102);
  const Mat a = random_mat(3, 4, rng);
  const Mat b = random_mat(6, 4, rng);
  check_input_gradient(a, [&](Tape& t, Var x) {
    Var bv = t.constant(b);
    return t.sum(t.matmul_nt(x, bv));
  });
  const Mat c = random_mat(3, 4, rng);
  check_input_gradient(a, [&](Tape& t, Var x) {
    Var cv = t.constant(c);
    return t.sum(t.cmul(t.sub(x, cv), t.scale(x, 2.5)));
  });
}

TEST_CASE("gradient: softmax rows with and without mask") {
  Rng rng(103);
  const Mat a = random_mat(4, 6, rng);
  const Mat coeff = random_mat(4, 6, rng);
  check_input_gradient(a, [&](Tape& t, Var x) {
    return t.sum(t.cmul(t.softmax_rows(x), t.constant(coeff)));
  });
  Mat mask = Mat::Zero(4, 6);
  mask(0, 5) = -1e30;
  mask(2, 1) = -1e30;
  check_input_gradient(a, [&](Tape& t, Var x) {
    return t.sum(t.cmul(t.masked_softmax_rows(x, mask), t.constant(coeff)));
  });
}

TEST_CASE("gradient: layer norm") {
  Rng rng(104);
  const Mat a = random_mat(5, 8, rng);
  const Mat gain = random_mat(1, 8, rng, 0.5);
  const Mat bias = random_mat(1, 8, rng, 0.5);
  const Mat coeff = random_mat(5, 8, rng);
  check_input_gradient(
      a,
      [&](Tape& t, Var x) {
        return t.sum(t.cmul(
            t.layer_norm_rows(x, t.constant(gain), t.constant(bias)),
            t.constant(coeff)));
      },
      1e-5);
  check_input_gradient(gain, [&](Tape& t, Var x) {
    return t.sum(t.cmul(t.layer_norm_rows(t.constant(a), x, t.constant(bias)),
                        t.constant(coeff)));
  });
}

TEST_CASE("gradient: gelu and sigmoid") {
  Rng rng(105);
  const Mat a = random_mat(4, 4, rng, 1.5);
  check_input_gradient(a, [&](Tape& t, Var x) { return t.sum(t.gelu(x)); });
  check_input_gradient(a, [&](Tape& t, Var x) { return t.mean(t.sigmoid(x)); });
}

TEST_CASE("gradient: cross entropy and bce") {
  Rng rng(106);
  const Mat logits = random_mat(5, 7, rng);
  const std::vector<int> targets = {0, 3, 6, 2, 2};
  check_input_gradient(logits, [&](Tape& t, Var x) {
    return t.cross_entropy_sum(x, targets);
  });
  const Mat elogits = random_mat(4, 1, rng);
  Mat ey = Mat::Zero(4, 1);
  ey(3, 0) = 1.0;
  check_input_gradient(elogits, [&](Tape& t, Var x) {
    return t.bce_with_logits_sum(x, ey);
  });
}

TEST_CASE("gradient: gather, concat, slice") {
  Rng rng(107);
  const Mat table = random_mat(6, 4, rng);
  const std::vector<int> idx = {2, 2, 5, 0};
  check_input_gradient(table, [&](Tape& t, Var x) {
    Var gathered = t.gather_rows(x, idx);
    Var joined = t.concat_cols({gathered, t.scale(gathered, 0.5)});
    return t.sum(t.slice_cols(joined, 2, 5));
  });
  const Mat a = random_mat(3, 4, rng);
  const Mat b = random_mat(2, 4, rng);
  check_input_gradient(a, [&](Tape& t, Var x) {
    Var joined = t.concat_rows({x, t.constant(b)});
    return t.sum(t.slice_rows(joined, 1, 3));
  });
}

TEST_CASE("gradient: gumbel softmax with fixed noise") {
  Rng rng(108);
  const Mat logits = random_mat(1, 9, rng);
  const Mat noise = random_mat(1, 9, rng);
  const Mat centers = random_mat(1, 9, rng);
  for (double tau : {2.0, 0.7}) {
    check_input_gradient(logits, [&](Tape& t, Var x) {
      Var soft = t.gumbel_softmax(x, tau, noise, /*hard=*/false);
      return t.matmul_nt(soft, t.constant(centers));
    });
  }
}

TEST_CASE("gumbel softmax basic behavior") {
  Rng rng(109);
  const Mat logits = random_mat(1, 5, rng);
  const Mat noise = random_mat(1, 5, rng);

  Tape t;
  Var soft = t.gumbel_softmax(t.constant(logits), 1.0, noise, false);
  CHECK(t.value(soft).sum() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(t.value(soft).minCoeff() >= 0.0);

  // near-zero temperature: one-hot at argmax(logits + noise)
  Var cold = t.gumbel_softmax(t.constant(logits), 1e-9, noise, false);
  Eigen::Index argmax = 0;
  (logits + noise).row(0).maxCoeff(&argmax);
  CHECK(t.value(cold)(0, argmax) == doctest::Approx(1.0).epsilon(1e-9));

  // hard: exact one-hot forward, soft gradient path
  Var hard = t.gumbel_softmax(t.constant(logits), 1.0, noise, true);
  CHECK(t.value(hard)(0, argmax) == 1.0);
  CHECK(t.value(hard).sum() == 1.0);

  CHECK_THROWS_AS(t.gumbel_softmax(t.constant(logits), 0.0, noise, false), Error);
}

TEST_CASE("gradient: transform_points") {
  Rng rng(110);
  const Mat local = random_mat(12, 3, rng);
  const Mat s = random_mat(1, 3, rng, 0.2).cwiseAbs() + Mat::Constant(1, 3, 0.3);
  const Mat r = random_mat(1, 3, rng, 0.8);
  const Mat tr = random_mat(1, 3, rng, 0.3);
  const Mat coeff = random_mat(12, 3, rng);

  check_input_gradient(s, [&](Tape& t, Var x) {
    return t.sum(t.cmul(
        t.transform_points(local, x, t.constant(r), t.constant(tr)), t.constant(coeff)));
  });
  check_input_gradient(r, [&](Tape& t, Var x) {
    return t.sum(t.cmul(
        t.transform_points(local, t.constant(s), x, t.constant(tr)), t.constant(coeff)));
  });
  check_input_gradient(tr, [&](Tape& t, Var x) {
    return t.sum(t.cmul(
        t.transform_points(local, t.constant(s), t.constant(r), x), t.constant(coeff)));
  });
}

TEST_CASE("gradient: chamfer") {
  Rng rng(111);
  const Mat pred = random_mat(10, 3, rng);
  const Mat gt = random_mat(14, 3, rng);
  check_input_gradient(
      pred, [&](Tape& t, Var x) { return t.chamfer(x, gt); }, 1e-5);
}

TEST_CASE("chamfer value on known configurations") {
  Tape t;
  Mat a(1, 3), b(1, 3);
  a << 0, 0, 0;
  b << 1, 0, 0;
  CHECK(t.value(t.chamfer(t.constant(a), b))(0, 0) == doctest::Approx(2.0));
  CHECK(t.value(t.chamfer(t.constant(a), a))(0, 0) == 0.0);
}

TEST_CASE("gradient: full attention block") {
  Rng rng(112);
  const int tlen = 5, dim = 8;
  const Mat x0 = random_mat(tlen, dim, rng, 0.5);
  const Mat wq = random_mat(dim, dim, rng, 0.3);
  const Mat wk = random_mat(dim, dim, rng, 0.3);
  const Mat wv = random_mat(dim, dim, rng, 0.3);
  Mat mask = Mat::Zero(tlen, tlen);
  for (int i = 0; i < tlen; ++i)
    for (int j = i + 1; j < tlen; ++j) mask(i, j) = -1e30;
  const Mat coeff = random_mat(tlen, dim, rng);

  check_input_gradient(
      x0,
      [&](Tape& t, Var x) {
        Var q = t.matmul(x, t.constant(wq));
        Var k = t.matmul(x, t.constant(wk));
        Var v = t.matmul(x, t.constant(wv));
        Var scores = t.scale(t.matmul_nt(q, k), 1.0 / std::sqrt(double(dim)));
        Var attn = t.masked_softmax_rows(scores, mask);
        return t.sum(t.cmul(t.matmul(attn, v), t.constant(coeff)));
      },
      1e-5);
}

TEST_CASE("parameter gradients route into the sink buffer") {
  Rng rng(113);
  ParamStore store;
  Parameter& w = store.create("w", 4, 3);
  init_normal(w, 0.5, rng);
  const Mat x = random_mat(2, 4, rng);

  GradBuffer buf(store);
  Tape tape(&buf);
  Var loss = tape.sum(tape.matmul(tape.constant(x), tape.param(w)));
  tape.backward(loss);
  buf.add_into_store(store, 1.0);

  // independent: gradient of sum(x*w) w.r.t. w is x^T * ones
  const Mat expected = x.transpose() * Mat::Ones(2, 3);
  CHECK((w.grad - expected).cwiseAbs().maxCoeff() < 1e-12);

  store.zero_grad();
  CHECK(w.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam takes a well-formed step") {
  Rng rng(114);
  ParamStore store;
  Parameter& w = store.create("w", 1, 1);
  w.value(0, 0) = 1.0;
  Adam adam(store, {});

  // minimize w^2; gradient = 2w
  for (int i = 0; i < 200; ++i) {
    store.zero_grad();
    w.grad(0, 0) = 2.0 * w.value(0, 0);
    adam.step();
  }
  CHECK(std::abs(w.value(0, 0)) < 0.9);
  CHECK(adam.step_count() == 200);
}

TEST_CASE("duplicate parameter names are rejected") {
  ParamStore store;
  store.create("w", 2, 2);
  CHECK_THROWS_AS(store.create("w", 1, 1), Error);
  CHECK(store.scalar_count() == 4);
}
