#include <doctest.h>

#include <filesystem>

#include "primgen/model.hpp"
#include "support/test_util.hpp"

using namespace primgen;
using nn::Mat;
using nn::Tape;
using nn::Var;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden_size = 64;
  cfg.attention_heads = 4;
  cfg.condition_tokens = 8;
  cfg.condition_points = 64;
  cfg.max_sequence = 12;
  return cfg;
}

PointCloud random_cloud(int n, Rng& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  PointCloud cloud;
  cloud.points.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) cloud.points(i, k) = uni(rng);
  return cloud;
}

TokenizedPrimitive random_token(Rng& rng, const ModelConfig& cfg) {
  TokenizedPrimitive t;
  t.class_index = int(rng() % cfg.num_classes);
  for (int k = 0; k < 3; ++k) {
    t.scale_bins[k] = int(rng() % cfg.scale_levels);
    t.rotation_bins[k] = int(rng() % cfg.rotation_levels);
    t.translation_bins[k] = int(rng() % cfg.translation_levels);
  }
  return t;
}

}  // namespace

TEST_CASE("encode_condition output shape and input validation") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 1);
  Rng rng(50);

  for (int n : {64, 200, 1000}) {
    Tape t;
    const PointCloud cloud = random_cloud(n, rng);
    Var c = model.encode_condition(t, cloud, 7);
    CHECK(t.value(c).rows() == cfg.condition_tokens);
    CHECK(t.value(c).cols() == cfg.hidden_size);
    CHECK(t.value(c).allFinite());
  }

  Tape t;
  CHECK_THROWS_AS(model.encode_condition(t, random_cloud(3, rng), 7), Error);
}

TEST_CASE("encode_condition is permutation invariant without subsampling") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 2);
  Rng rng(51);
  const PointCloud cloud = random_cloud(cfg.condition_points, rng);

  PointCloud permuted;
  permuted.points.resize(cloud.points.rows(), 3);
  std::vector<int> order(cloud.points.rows());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (Eigen::Index i = 0; i < cloud.points.rows(); ++i)
    permuted.points.row(i) = cloud.points.row(order[i]);

  Tape t1, t2;
  const Mat a = t1.value(model.encode_condition(t1, cloud, 9));
  const Mat b = t2.value(model.encode_condition(t2, permuted, 9));
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("embed_primitives shape, determinism and class sensitivity") {
  const ModelConfig cfg = tiny_config();
  Rng rng(52);

  // distinctness over many seeded table draws
  int collisions = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    PrimitiveModel model(cfg, 1000 + trial);
    Tape t;
    TokenizedPrimitive a = random_token(rng, cfg);
    TokenizedPrimitive b = a;
    b.class_index = (a.class_index + 1) % cfg.num_classes;
    Var h = model.embed_primitives(t, {a, b});
    CHECK(t.value(h).rows() == 2);
    CHECK(t.value(h).cols() == cfg.hidden_size);
    if ((t.value(h).row(0) - t.value(h).row(1)).cwiseAbs().maxCoeff() < 1e-12)
      ++collisions;
  }
  CHECK(collisions == 0);

  // identical tokens embed identically
  PrimitiveModel model(cfg, 3);
  Tape t;
  TokenizedPrimitive tok = random_token(rng, cfg);
  Var h = model.embed_primitives(t, {tok, tok});
  CHECK((t.value(h).row(0) - t.value(h).row(1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward_sequence feature counts and length guard") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 4);
  Rng rng(53);
  const PointCloud cloud = random_cloud(cfg.condition_points, rng);

  for (int m : {0, 1, 5, cfg.max_sequence}) {
    Tape t;
    Var cond = model.encode_condition(t, cloud, 1);
    std::vector<TokenizedPrimitive> tokens;
    for (int i = 0; i < m; ++i) tokens.push_back(random_token(rng, cfg));
    Var f = model.forward_sequence(t, cond, model.embed_primitives(t, tokens));
    CHECK(t.value(f).rows() == m + 1);
    CHECK(t.value(f).cols() == cfg.hidden_size);
  }

  Tape t;
  Var cond = model.encode_condition(t, cloud, 1);
  std::vector<TokenizedPrimitive> tokens;
  for (int i = 0; i < cfg.max_sequence + 1; ++i) tokens.push_back(random_token(rng, cfg));
  CHECK_THROWS_AS(model.forward_sequence(t, cond, model.embed_primitives(t, tokens)),
                  Error);
}

TEST_CASE("causal mask: perturbing token j leaves earlier features unchanged") {
  const ModelConfig cfg = tiny_config();
  Rng rng(54);
  const PointCloud cloud = random_cloud(cfg.condition_points, rng);
  const int m = 6;

  for (int seed = 0; seed < 3; ++seed) {
    PrimitiveModel model(cfg, 100 + seed);
    std::vector<TokenizedPrimitive> tokens;
    for (int i = 0; i < m; ++i) tokens.push_back(random_token(rng, cfg));

    Tape t_base;
    Var cond_b = model.encode_condition(t_base, cloud, 1);
    Var emb_b = model.embed_primitives(t_base, tokens);
    const Mat base =
        t_base.value(model.forward_sequence(t_base, cond_b, emb_b));

    for (int j = 0; j < m; ++j) {
      Tape t;
      Var cond = model.encode_condition(t, cloud, 1);
      Var emb = model.embed_primitives(t, tokens);
      // non-uniform bump: a constant row shift would sit in layer norm's
      // null space and vanish from the outputs
      Mat bump = Mat::Zero(m, cfg.hidden_size);
      for (int c = 0; c < cfg.hidden_size; ++c) bump(j, c) = 0.1 * ((c % 5) - 2);
      Var perturbed = t.add(emb, t.constant(bump));
      const Mat f = t.value(model.forward_sequence(t, cond, perturbed));
      // features at positions SOS..h_{j} are indices 0..j; h_j feeds position j+1
      CHECK((f.topRows(j + 1) - base.topRows(j + 1)).cwiseAbs().maxCoeff() < 1e-5);
      CHECK((f.row(j + 1) - base.row(j + 1)).cwiseAbs().maxCoeff() > 1e-8);
    }
  }
}

TEST_CASE("heads produce the contracted shapes and normalized softmax rows") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 5);
  Rng rng(55);
  const PointCloud cloud = random_cloud(cfg.condition_points, rng);

  Tape t;
  Var cond = model.encode_condition(t, cloud, 1);
  std::vector<TokenizedPrimitive> tokens = {random_token(rng, cfg),
                                            random_token(rng, cfg)};
  Var f = model.forward_sequence(t, cond, model.embed_primitives(t, tokens));
  Var steps = t.slice_rows(f, 0, 2);

  std::vector<int> classes = {tokens[0].class_index, tokens[1].class_index};
  Var ce = model.class_embeddings(t, classes);
  Var te = model.translation_embeddings(
      t, {tokens[0].translation_bins, tokens[1].translation_bins});
  Var re = model.rotation_embeddings(
      t, {tokens[0].rotation_bins, tokens[1].rotation_bins});

  Var cl = model.class_logits(t, steps);
  Var tl = model.translation_logits(t, steps, ce);
  Var rl = model.rotation_logits(t, steps, ce, te);
  Var sl = model.scale_logits(t, steps, ce, te, re);
  Var el = model.eos_logits(t, f);
  CHECK(t.value(cl).cols() == cfg.num_classes);
  CHECK(t.value(tl).cols() == 3 * cfg.translation_levels);
  CHECK(t.value(rl).cols() == 3 * cfg.rotation_levels);
  CHECK(t.value(sl).cols() == 3 * cfg.scale_levels);
  CHECK(t.value(el).cols() == 1);
  CHECK(t.value(el).rows() == 3);

  // softmax of each per-dimension block sums to 1
  for (int d = 0; d < 3; ++d) {
    Var block = t.slice_cols(tl, d * cfg.translation_levels, cfg.translation_levels);
    Var sm = t.softmax_rows(block);
    for (int r = 0; r < 2; ++r)
      CHECK(t.value(sm).row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cascade heads depend on the class embedding") {
  const ModelConfig cfg = tiny_config();
  Rng rng(56);
  int sensitive = 0;
  for (int seed = 0; seed < 5; ++seed) {
    PrimitiveModel model(cfg, 200 + seed);
    Tape t;
    Var f = t.constant(Mat::Random(1, cfg.hidden_size));
    Var e0 = model.class_embeddings(t, {0});
    Var e1 = model.class_embeddings(t, {1});
    const Mat l0 = t.value(model.translation_logits(t, f, e0));
    const Mat l1 = t.value(model.translation_logits(t, f, e1));
    if ((l0 - l1).cwiseAbs().maxCoeff() > 1e-9) ++sensitive;
  }
  CHECK(sensitive == 5);
}

TEST_CASE("attribute decoder enforces the cascade order") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 6);
  Tape t;
  Var f = t.constant(Mat::Random(1, cfg.hidden_size));

  AttributeDecoder dec(model, t, f);
  CHECK_THROWS_AS(dec.translation_logits(), Error);  // class not decoded yet
  CHECK(dec.class_logits().size() == cfg.num_classes);
  dec.set_class(1);
  CHECK(dec.translation_logits().rows() == 3);
  CHECK_THROWS_AS(dec.scale_logits(), Error);  // rotation missing
  dec.set_translation({1, 2, 3});
  CHECK(dec.rotation_logits().cols() == cfg.rotation_levels);
  dec.set_rotation({5, 6, 7});
  CHECK(dec.scale_logits().cols() == cfg.scale_levels);
  dec.set_scale({9, 10, 11});
  CHECK(std::isfinite(dec.eos_logit()));
}

TEST_CASE("model forward is deterministic in-process") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 7);
  Rng rng(57);
  const PointCloud cloud = random_cloud(cfg.condition_points, rng);
  std::vector<TokenizedPrimitive> tokens = {random_token(rng, cfg)};

  Mat first;
  for (int run = 0; run < 2; ++run) {
    Tape t;
    Var cond = model.encode_condition(t, cloud, 3);
    Var f = model.forward_sequence(t, cond, model.embed_primitives(t, tokens));
    if (run == 0)
      first = t.value(f);
    else
      CHECK((t.value(f) - first).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("parameter count is reported and matches table shapes") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 8);
  CHECK(model.parameter_count() > 0);
  const nn::Parameter* cls = model.params().find("embed.class");
  REQUIRE(cls != nullptr);
  CHECK(cls->value.rows() == cfg.num_classes);
  CHECK(cls->value.cols() == cfg.class_embed_dim);
  const nn::Parameter* rot = model.params().find("embed.rotation0");
  REQUIRE(rot != nullptr);
  CHECK(rot->value.rows() == cfg.rotation_levels);
  CHECK(rot->value.cols() == cfg.attr_embed_dim);
}

TEST_CASE("checkpoint save/load reproduces outputs bit-exactly") {
  const ModelConfig cfg = tiny_config();
  PrimitiveModel model(cfg, 9);
  Rng rng(58);
  const PointCloud cloud = random_cloud(cfg.condition_points, rng);
  std::vector<TokenizedPrimitive> tokens = {random_token(rng, cfg)};

  const auto dir = std::filesystem::temp_directory_path() / "primgen_model_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  CheckpointExtra extra;
  extra.strings["step"] = "42";
  extra.arrays["adam.example"] = Mat::Random(3, 2);
  save_checkpoint(model, path, extra);

  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(loaded.model.config() == cfg);
  CHECK(loaded.discretizer == cfg.discretizer());
  CHECK(loaded.extra.strings.at("step") == "42");
  CHECK(loaded.extra.arrays.at("adam.example").rows() == 3);

  Tape t1, t2;
  const Mat a = t1.value(model.forward_sequence(
      t1, model.encode_condition(t1, cloud, 3), model.embed_primitives(t1, tokens)));
  const Mat b = t2.value(loaded.model.forward_sequence(
      t2, loaded.model.encode_condition(t2, cloud, 3),
      loaded.model.embed_primitives(t2, tokens)));
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("invalid model configs are rejected") {
  ModelConfig bad = tiny_config();
  bad.hidden_size = 65;  // not divisible by heads
  CHECK_THROWS_AS(PrimitiveModel(bad, 1), Error);
  bad = tiny_config();
  bad.layers = 0;
  CHECK_THROWS_AS(PrimitiveModel(bad, 1), Error);
}
