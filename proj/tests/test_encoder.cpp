#include <gtest/gtest.h>

#include <numeric>

#include "sgpc/encoder.hpp"
#include "test_util.hpp"

using namespace sgpc;
using sgpc::testing::random_patch;
using sgpc::testing::random_points;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig c;
  c.d_f = 16;
  c.d_p = 8;
  c.d_s = 8;
  c.d_z = 8;
  c.blocks = 2;
  c.heads = 2;
  c.num_classes = 8;
  return c;
}

nn::ParameterStore<double> make_store(const EncoderConfig& c, std::uint64_t seed = 1) {
  nn::ParameterStore<double> s;
  add_encoder_params(s, c, seed);
  return s;
}

Eigen::MatrixXd to_mat(const nn::Var<double>& v) {
  const auto& sh = v.shape();
  Eigen::MatrixXd m(sh[0], sh[1]);
  for (std::size_t i = 0; i < sh[0]; ++i) {
    for (std::size_t j = 0; j < sh[1]; ++j) m(i, j) = v.value()[i * sh[1] + j];
  }
  return m;
}

Eigen::MatrixXd weight(nn::ParameterStore<double>& s, const std::string& name) {
  const auto& t = s.at(name);
  Eigen::MatrixXd m(t.shape[0], t.shape[1]);
  for (std::size_t i = 0; i < t.shape[0]; ++i) {
    for (std::size_t j = 0; j < t.shape[1]; ++j) m(i, j) = t.data[i * t.shape[1] + j];
  }
  return m;
}

Eigen::RowVectorXd bias(nn::ParameterStore<double>& s, const std::string& name) {
  const auto& t = s.at(name);
  return Eigen::Map<const Eigen::RowVectorXd>(t.data.data(), static_cast<Eigen::Index>(t.numel()));
}

void perturb(nn::ParameterStore<double>& s, const std::string& name, std::uint64_t seed, double sigma = 0.5) {
  auto& t = s.at(name);
  const CounterRng rng(seed);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] += sigma * rng.normal(i);
}

void zero(nn::ParameterStore<double>& s, const std::string& name) {
  auto& t = s.at(name);
  std::fill(t.data.begin(), t.data.end(), 0.0);
}

std::vector<double> latent(const Patch& p, const EncoderConfig& c, nn::ParameterStore<double>& s) {
  nn::Tape<double> t(false);
  return encode_graph(t, s, c, p).value();
}

}  // namespace

TEST(Embed, ZeroWeightsAndDuplicates) {
  auto c = small_cfg();
  auto s = make_store(c);
  for (const char* n : {"enc.point.w", "enc.point.b", "enc.pos.w", "enc.pos.b", "enc.pos_proj.w", "enc.pos_proj.b"}) {
    zero(s, n);
  }
  nn::Tape<double> t;
  auto e = embed_points(t, s, nn::points_constant(t, random_points(5, 1), 5));
  for (double v : e.features.value()) EXPECT_EQ(v, 0.0);

  auto s2 = make_store(c);
  auto pts = random_points(4, 2);
  pts[3] = pts[1];
  nn::Tape<double> t2;
  const auto h = to_mat(embed_points(t2, s2, nn::points_constant(t2, pts, 4)).features);
  EXPECT_EQ(h.row(1), h.row(3));
}

TEST(Embed, CompositionalOracle) {
  auto c = small_cfg();
  auto s = make_store(c, 5);
  for (const char* n : {"enc.point.b", "enc.pos.b", "enc.pos_proj.b"}) perturb(s, n, 3);
  const auto pts = random_points(30, 4);
  Eigen::MatrixXd x(30, 3);
  for (int i = 0; i < 30; ++i) x.row(i) = pts[i].transpose();
  nn::Tape<double> t;
  const auto e = embed_points(t, s, nn::points_constant(t, pts, 30));
  const Eigen::MatrixXd f = (x * weight(s, "enc.point.w")).rowwise() + bias(s, "enc.point.b");
  const Eigen::MatrixXd p = (x * weight(s, "enc.pos.w")).rowwise() + bias(s, "enc.pos.b");
  const Eigen::MatrixXd h = f + ((p * weight(s, "enc.pos_proj.w")).rowwise() + bias(s, "enc.pos_proj.b"));
  EXPECT_LT((to_mat(e.features) - h).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((to_mat(e.positional) - p).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Film, IdentityAtInitAndCollapse) {
  auto c = small_cfg();
  auto s = make_store(c);
  nn::Tape<double> t;
  const auto pts = random_points(6, 1);
  std::vector<double> hv(6 * c.d_f);
  const CounterRng rng(9);
  for (std::size_t i = 0; i < hv.size(); ++i) hv[i] = rng.normal(i);
  auto h = t.constant({6, c.d_f}, hv);
  EXPECT_EQ(film_modulate(t, s, h, 3).value(), hv);
  EXPECT_THROW(film_modulate(t, s, h, 8), Error);

  // gamma == 0: every row equals beta(s).
  zero(s, "enc.film.gamma.1.b");
  perturb(s, "enc.film.beta.1.b", 4);
  perturb(s, "enc.film.beta.1.w", 5);
  nn::Tape<double> t2;
  const auto out = to_mat(film_modulate(t2, s, t2.constant({6, c.d_f}, hv), 3));
  for (int r = 1; r < 6; ++r) EXPECT_EQ(out.row(r), out.row(0));
}

TEST(Film, ClassSensitivityAfterPerturbation) {
  auto c = small_cfg();
  auto s = make_store(c);
  const auto p = random_patch(20, 32, 3, 2);
  auto q = p;
  q.class_id = 6;
  // Identity FiLM at init: class has no effect.
  EXPECT_EQ(latent(p, c, s), latent(q, c, s));
  for (const char* n : {"enc.film.gamma.1.w", "enc.film.beta.1.w"}) perturb(s, n, 7);
  const auto a = latent(p, c, s), b = latent(q, c, s);
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_GT(d, 1e-8);
}

TEST(Film, ClassEmbeddingReceivesGradient) {
  auto c = small_cfg();
  auto s = make_store(c);
  for (const char* n : {"enc.film.gamma.1.w", "enc.film.beta.1.w"}) perturb(s, n, 7, 0.1);
  s.zero_grad();
  const auto p = random_patch(20, 32, 3, 2);
  {
    nn::Tape<double> t(true, 1);
    t.backward(nn::sum(encode_graph(t, s, c, p)));
  }
  const auto& g = s.at("enc.class_embed").grad;
  double row = 0;
  for (std::size_t j = 0; j < c.d_s; ++j) row += std::abs(g[2 * c.d_s + j]);
  EXPECT_GT(row, 0.0);
}

TEST(TransformerBlock, SingleRowAndEquivariance) {
  auto c = small_cfg();
  c.dropout = 0.0;
  auto s = make_store(c, 3);
  const auto pts = random_points(12, 8);
  const auto run = [&](const std::vector<Vec3>& x, const std::vector<bool>& valid) {
    nn::Tape<double> t;
    auto h = embed_points(t, s, nn::points_constant(t, x, x.size())).features;
    return to_mat(transformer_block(t, s, c, 0, h, valid));
  };
  // One valid key: attention output is that row's value projection.
  const auto one = run({pts[0]}, {true});
  EXPECT_EQ(one.rows(), 1);
  EXPECT_TRUE(one.allFinite());

  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[5]);
  std::vector<Vec3> shuffled(12);
  for (std::size_t i = 0; i < 12; ++i) shuffled[i] = pts[perm[i]];
  const auto a = run(pts, std::vector<bool>(12, true));
  const auto b = run(shuffled, std::vector<bool>(12, true));
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_LT((b.row(static_cast<Eigen::Index>(i)) - a.row(static_cast<Eigen::Index>(perm[i]))).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TransformerBlock, PaddedKeysGetNoMassAndPaddedRowsZero) {
  auto c = small_cfg();
  auto s = make_store(c, 3);
  const auto p = random_patch(7, 12, 4);
  nn::Tape<double> t;
  auto x = nn::points_constant(t, p.points_local, 12);
  auto h = embed_points(t, s, x).features;
  auto q = nn::linear(t, s, "enc.block0.q", h);
  auto k = nn::linear(t, s, "enc.block0.k", h);
  for (std::size_t head = 0; head < c.heads; ++head) {
    const auto w = nn::attention_weights(q.value(), k.value(), 12, c.d_f, c.heads, head, p.valid_mask);
    for (int i = 0; i < 12; ++i) {
      EXPECT_NEAR(w.row(i).sum(), 1.0, 1e-12);
      for (int j = 7; j < 12; ++j) EXPECT_EQ(w(i, j), 0.0);
    }
  }
  const auto out = to_mat(transformer_block(t, s, c, 0, h, p.valid_mask));
  EXPECT_EQ(out.bottomRows(5).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Pool, UniformScoresGiveMeanAndWeightsNormalize) {
  auto c = small_cfg();
  auto s = make_store(c, 2);
  zero(s, "enc.pool.1.w");  // constant score
  const auto p = random_patch(5, 9, 6);
  nn::Tape<double> t;
  auto x = nn::points_constant(t, p.points_local, 9);
  auto e = embed_points(t, s, x);
  const auto pool = spatial_attention_pool(t, s, x, e.positional, e.features, p.valid_mask);
  const auto h = to_mat(e.features);
  const Eigen::RowVectorXd mean = h.topRows(5).colwise().mean();
  EXPECT_LT((to_mat(pool.global) - mean).cwiseAbs().maxCoeff(), 1e-12);

  // One valid row: g is that row.
  const auto single = random_patch(1, 4, 6);
  nn::Tape<double> t1;
  auto x1 = nn::points_constant(t1, single.points_local, 4);
  auto e1 = embed_points(t1, s, x1);
  const auto g1 = spatial_attention_pool(t1, s, x1, e1.positional, e1.features, single.valid_mask);
  EXPECT_LT((to_mat(g1.global) - to_mat(e1.features).topRows(1)).cwiseAbs().maxCoeff(), 1e-12);

  EXPECT_THROW(spatial_attention_pool(t1, s, x1, e1.positional, e1.features, std::vector<bool>(4, false)), InputError);
}

TEST(Pool, RandomWeightsSumToOne) {
  auto c = small_cfg();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto s = make_store(c, seed);
    auto r = CounterRng(seed).stream();
    const std::size_t cap = 4 + r.below(40);
    const auto p = random_patch(1 + r.below(cap), cap, seed);
    nn::Tape<double> t;
    auto x = nn::points_constant(t, p.points_local, cap);
    auto e = embed_points(t, s, x);
    const auto w = spatial_attention_pool(t, s, x, e.positional, e.features, p.valid_mask).weights.value();
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-6);
    for (std::size_t i = p.n_valid; i < cap; ++i) EXPECT_EQ(w[i], 0.0);
  }
}

TEST(EncodePatch, DeterministicAndPackedEqualsPadded) {
  auto c = small_cfg();
  auto s = make_store(c, 8);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = random_patch(3 + seed, 40, seed);
    EXPECT_EQ(latent(p, c, s), latent(p, c, s));
    nn::Tape<double> t;
    const auto full = encode_graph(t, s, c, p, false).value();
    const auto packed = latent(p, c, s);
    for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(full[i], packed[i], 1e-10);
  }
  auto sf = make_store(c, 8).cast<float>();
  const auto p = random_patch(10, 16, 1);
  const auto z = encode_patch(p, c, sf);
  EXPECT_EQ(z.values.size(), c.d_z);
  EXPECT_EQ(z.values, encode_patch(p, c, sf).values);
  EXPECT_THROW(encode_patch(random_patch(0, 16, 1), c, sf), InputError);
}

TEST(EncodePatch, PermutationInvariance) {
  auto c = small_cfg();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto s = make_store(c, seed).cast<float>();
    auto r = CounterRng(seed + 1).stream();
    const std::size_t cap = 8 + r.below(60);
    const auto p = random_patch(1 + r.below(cap), cap, seed);
    auto q = p;
    for (std::size_t i = p.n_valid; i-- > 1;) std::swap(q.points_local[i], q.points_local[r.below(i + 1)]);
    const auto a = encode_patch(p, c, s).values;
    const auto b = encode_patch(q, c, s).values;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      num = std::max(num, static_cast<double>(std::abs(a[i] - b[i])));
      den = std::max(den, static_cast<double>(std::abs(a[i])));
    }
    EXPECT_LE(num, 1e-5 * std::max(1.0, den)) << seed;
  }
}

TEST(EncoderConfig, Validation) {
  auto c = small_cfg();
  c.heads = 3;
  EXPECT_THROW(c.validate(), InputError);
  c = small_cfg();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), InputError);
  EXPECT_TRUE(is_release_latent_dim(16));
  EXPECT_FALSE(is_release_latent_dim(24));
}
