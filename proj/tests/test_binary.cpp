#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace sdaie;
using sdaie::testing::toy_arch;

namespace {

std::vector<Vec<double>> stages_of(std::initializer_list<int> dims, double fill) {
  std::vector<Vec<double>> v;
  for (int d : dims) v.push_back(Vec<double>::Constant(d, fill));
  return v;
}

template <typename T>
double param_distance(BinaryModel<T>& model, Backbone<T>& ref) {
  auto a = collect_params<T>(model.backbone());
  auto b = collect_params<T>(ref);
  double sq = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    sq += (a[i]->value.template cast<double>() - b[i]->value.template cast<double>()).squaredNorm();
  return std::sqrt(sq);
}

DatasetManifest split(const DatasetManifest& m, bool held) {
  DatasetManifest out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if ((i % 4 == 0) == held) out.entries.push_back(m.entries[i]);
  return out;
}

}  // namespace

TEST(LossCls, Examples) {
  EXPECT_NEAR(loss_cls(0.5, 1), std::log(2.0), 1e-12);
  EXPECT_NEAR(loss_cls(0.5, 0), std::log(2.0), 1e-12);
  EXPECT_NEAR(loss_cls(0.9, 1), -std::log(0.9), 1e-12);
  EXPECT_NEAR(loss_cls(0.9, 1), 0.1054, 1e-4);
  EXPECT_NEAR(loss_cls(0.9, 0), 2.3026, 1e-4);
  EXPECT_NEAR(loss_cls(0.0, 1), -std::log(1e-7), 1e-9);
  EXPECT_TRUE(std::isfinite(loss_cls(1.0, 0)));
}

TEST(LossCls, LogitGradientMatchesDifference) {
  for (double z : {-3.0, -0.2, 0.0, 1.5}) {
    for (int y : {0, 1}) {
      const double h = 1e-6;
      const double num = (loss_cls(sigmoid(z + h), y) - loss_cls(sigmoid(z - h), y)) / (2 * h);
      EXPECT_NEAR(loss_cls_logit_grad(sigmoid(z), y), num, 1e-7);
    }
  }
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_GT(sigmoid(-800.0), -1e-300);
  EXPECT_LE(sigmoid(800.0), 1.0);
}

TEST(LossReg, Examples) {
  auto a = stages_of({3, 7}, 0.25);
  EXPECT_EQ(loss_reg(a, a), 0.0);
  EXPECT_NEAR(loss_reg(stages_of({9}, 1.0), stages_of({9}, 0.0)), 1.0, 1e-15);
  Rng rng(2);
  std::vector<Vec<double>> live, ref, twice;
  for (int d : {4, 16, 5}) {
    Vec<double> r(d), l(d);
    for (int i = 0; i < d; ++i) r(i) = rng.normal(), l(i) = rng.normal();
    ref.push_back(r);
    live.push_back(l);
    twice.push_back(r + 2.0 * (l - r));
  }
  const double base = loss_reg(live, ref);
  EXPECT_GT(base, 0.0);
  EXPECT_NEAR(loss_reg(twice, ref), 4.0 * base, 1e-12);
}

TEST(LossReg, ScaleInvariantAcrossStageWidths) {
  // unit difference per coordinate gives 1 no matter how wide each stage is
  EXPECT_NEAR(loss_reg(stages_of({1, 10, 528}, 2.0), stages_of({1, 10, 528}, 1.0)), 1.0, 1e-12);
}

TEST(LossReg, MismatchThrows) {
  EXPECT_THROW(loss_reg(stages_of({3}, 0), stages_of({4}, 0)), Error);
  EXPECT_THROW(loss_reg(stages_of({3, 3}, 0), stages_of({3}, 0)), Error);
}

TEST(LossReg, GradientMatchesDifference) {
  Rng rng(4);
  std::vector<Vec<double>> live, ref;
  for (int d : {3, 6}) {
    Vec<double> l(d), r(d);
    for (int i = 0; i < d; ++i) l(i) = rng.normal(), r(i) = rng.normal();
    live.push_back(l);
    ref.push_back(r);
  }
  std::vector<Vec<double>> g;
  loss_reg(live, ref, &g);
  for (std::size_t s = 0; s < live.size(); ++s)
    for (Eigen::Index i = 0; i < live[s].size(); ++i) {
      auto up = live, down = live;
      up[s](i) += 1e-6;
      down[s](i) -= 1e-6;
      EXPECT_NEAR(g[s](i), (loss_reg(up, ref) - loss_reg(down, ref)) / 2e-6, 1e-8);
    }
}

class BinaryToy : public ::testing::Test {
 protected:
  void SetUp() override {
    manifest = sdaie::testing::small_suite("binary_toy", store, 6, 3, 3);
    frozen = Backbone<float>(toy_arch());
    frozen.init(11);
  }
  ImageStore store;
  DatasetManifest manifest;
  Backbone<float> frozen{toy_arch()};
};

TEST_F(BinaryToy, ReferenceCacheShapeAndDeterminism) {
  auto a = cache_reference_features(manifest, frozen, store, false, "abc");
  auto b = cache_reference_features(manifest, frozen, store, false, "abc");
  EXPECT_EQ(a.size(), manifest.size());
  EXPECT_EQ(a.digest(), b.digest());
  for (const auto& e : manifest.entries) {
    const auto& s = a.at(e.image_path);
    ASSERT_EQ(s.size(), static_cast<std::size_t>(frozen.arch().stage_count()));
    for (std::size_t l = 0; l < s.size(); ++l) EXPECT_EQ(s[l].size(), a.stage_dims[l]);
  }
  EXPECT_THROW(a.at("nope.png"), Error);
  auto aug = cache_reference_features(manifest, frozen, store, true, "abc");
  EXPECT_NE(aug.digest(), a.digest());
  EXPECT_EQ(aug.digest(), cache_reference_features(manifest, frozen, store, true, "abc").digest());
}

TEST_F(BinaryToy, ReferenceCacheRoundTrip) {
  auto a = cache_reference_features(manifest, frozen, store, false, "0123456789abcdef");
  const auto dir = sdaie::testing::scratch_dir("binary_cache");
  a.save(dir / "ref.cache");
  auto b = ReferenceCache::load(dir / "ref.cache");
  EXPECT_EQ(b.theta_digest, a.theta_digest);
  EXPECT_EQ(b.stage_dims, a.stage_dims);
  EXPECT_EQ(b.digest(), a.digest());
  std::ofstream(dir / "junk.cache") << "not a cache";
  EXPECT_THROW(ReferenceCache::load(dir / "junk.cache"), Error);
  EXPECT_THROW(ReferenceCache::load(dir / "missing.cache"), Error);
}

TEST_F(BinaryToy, CacheReportsMissingImage) {
  auto m = manifest;
  ManifestEntry e = m.entries.front();
  e.image_path = "camera/does_not_exist.png";
  e.resolved = e.resolved.parent_path() / "does_not_exist.png";
  m.entries.push_back(e);
  try {
    cache_reference_features(m, frozen, store);
    FAIL() << "expected an error";
  } catch (const Error& err) {
    EXPECT_NE(std::string(err.what()).find("does_not_exist.png"), std::string::npos);
  }
}

TEST_F(BinaryToy, RegularizerIsZeroAtInitialization) {
  auto cache = cache_reference_features(manifest, frozen, store);
  BinaryModel<float> model(frozen.arch());
  model.load_backbone(frozen);
  model.init_head(1);
  const Minibatch batch = make_batch(manifest, {0, 1, 6, 9}, store);
  auto r = loss_binary_total(model, batch, cache, 0.05);
  EXPECT_EQ(r.reg, 0.0);
  EXPECT_NEAR(r.total, r.cls, 1e-15);
}

TEST_F(BinaryToy, TotalComposesTerms) {
  auto cache = cache_reference_features(manifest, frozen, store);
  Backbone<float> other(toy_arch());
  other.init(12);
  BinaryModel<float> model(frozen.arch());
  model.load_backbone(other);
  model.init_head(1);
  const Minibatch one = make_batch(manifest, {7}, store);
  const auto g0 = loss_binary_total(model, one, cache, 0.0);
  const auto g1 = loss_binary_total(model, one, cache, 0.05);
  EXPECT_EQ(g0.reg, 0.0);
  EXPECT_DOUBLE_EQ(g0.total, g0.cls);
  EXPECT_GT(g1.reg, 0.0);
  EXPECT_NEAR(g1.total, g1.cls + 0.05 * g1.reg, 1e-12);
  EXPECT_NEAR(g1.cls, g0.cls, 1e-12);

  // batch total is the mean of the per-image totals
  const Minibatch two = make_batch(manifest, {0, 7}, store);
  const auto a = loss_binary_total(model, make_batch(manifest, {0}, store), cache, 0.05);
  EXPECT_NEAR(loss_binary_total(model, two, cache, 0.05).total, 0.5 * (a.total + g1.total), 1e-9);
  EXPECT_THROW(loss_binary_total(model, two, cache, -1.0), Error);
}

TEST_F(BinaryToy, GradientCheck) {
  auto cache = cache_reference_features(manifest, frozen, store);
  Backbone<double> start(toy_arch());
  start.init(13);
  BinaryModel<double> model(toy_arch());
  model.load_backbone(start);
  model.init_head(2);
  // a larger head so the classification path carries signal into the extractor
  Rng rng(3);
  model.head().init(rng);
  const Minibatch batch = make_batch(manifest, {1, 8}, store);
  auto params = collect_params<double>(model);
  zero_grads(params);
  loss_binary_total(model, batch, cache, 0.5, false, true);
  // pooling and ReLU kinks sit within 1e-5 of some inputs here; a smaller step avoids straddling them
  auto g = sdaie::testing::check_params(
      params, [&] { return loss_binary_total(model, batch, cache, 0.5).total; }, 1e-6);
  EXPECT_GT(g.checked, 1000u);
  EXPECT_LT(g.worst, 1e-3) << g.worst_name;
}

TEST_F(BinaryToy, TrainRejectsSingleLabel) {
  DatasetManifest cams;
  for (const auto& e : manifest.entries)
    if (e.label == Label::photographic) cams.entries.push_back(e);
  auto cache = cache_reference_features(cams, frozen, store);
  BinaryConfig cfg;
  cfg.iterations = 1;
  cfg.batch_size = 2;
  EXPECT_THROW(train_binary(cams, frozen, cache, cfg, store), Error);
}

TEST(ReferenceCache, DefaultArchHasTwelveStages) {
  EXPECT_EQ(ArchConfig{}.stage_count(), 12);
  EXPECT_EQ(ArchConfig{}.stage_dims().size(), 12u);
}

TEST(BinaryConfig, Defaults) {
  BinaryConfig c;
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.batch_size, 100u);
  EXPECT_EQ(c.iterations, 1800);
  EXPECT_EQ(c.gamma, 0.05);
  c.gamma = 0.2;
  c.seed = 9;
  EXPECT_EQ(BinaryConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST_F(BinaryToy, PredictProbInUnitInterval) {
  BinaryModel<float> model(frozen.arch());
  model.load_backbone(frozen);
  for (auto* p : collect_params<float>(model.head())) p->value.setZero();
  const auto& img = store.get(manifest.entries[0]);
  EXPECT_EQ(predict_prob(img, model), 0.5);
  model.init_head(4);
  for (const auto& e : manifest.entries) {
    const double p = predict_prob(store.get(e), model);
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST_F(BinaryToy, SaveLoadRoundTrip) {
  BinaryModel<float> model(frozen.arch());
  model.load_backbone(frozen);
  model.init_head(4);
  const auto dir = sdaie::testing::scratch_dir("binary_ckpt");
  save_binary(model, dir, "feedface");
  auto back = load_binary<float>(dir);
  EXPECT_EQ(params_digest(collect_params<float>(back)), params_digest(collect_params<float>(model)));
  const auto& img = store.get(manifest.entries[2]);
  EXPECT_EQ(predict_prob(img, back), predict_prob(img, model));
}

TEST(TrainBinary, ToyRunSeparatesHeldOut) {
  ImageStore store;
  auto all = sdaie::testing::small_suite("binary_train", store, 48, 24, 24);
  auto train = split(all, false), held = split(all, true);
  Backbone<float> frozen(toy_arch());
  frozen.init(21);
  auto cache = cache_reference_features(train, frozen, store, true);
  BinaryConfig cfg;
  cfg.iterations = 400;
  cfg.batch_size = 8;
  cfg.seed = 2;
  std::vector<BinaryLogRow> log;
  auto model = train_binary(train, frozen, cache, cfg, store, &log);
  ASSERT_EQ(log.size(), 400u);
  for (const auto& r : log) EXPECT_TRUE(std::isfinite(r.report.reg));
  double correct = 0;
  for (const auto& e : held.entries)
    correct += (predict_prob(store.get(e), model) >= 0.5) == (e.label == Label::photographic);
  EXPECT_GT(correct / static_cast<double>(held.size()), 0.9);

  const auto dir = sdaie::testing::scratch_dir("binary_log");
  write_binary_log(log, dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "iteration,loss_cls,loss_reg,total_loss,accuracy");

  // same seed, same weights
  auto again = train_binary(train, frozen, cache, cfg, store);
  EXPECT_EQ(params_digest(collect_params<float>(again)), params_digest(collect_params<float>(model)));
}

TEST(TrainBinary, HugeGammaStaysNearReference) {
  ImageStore store;
  auto m = sdaie::testing::small_suite("binary_gamma", store, 12, 6, 6);
  Backbone<float> frozen(toy_arch());
  frozen.init(31);
  auto cache = cache_reference_features(m, frozen, store, true);
  BinaryConfig cfg;
  cfg.iterations = 40;
  cfg.batch_size = 8;
  cfg.seed = 3;
  cfg.gamma = 0.0;
  auto free_model = train_binary(m, frozen, cache, cfg, store);
  cfg.gamma = 1e6;
  auto tied_model = train_binary(m, frozen, cache, cfg, store);
  const double d_free = param_distance(free_model, frozen), d_tied = param_distance(tied_model, frozen);
  EXPECT_GT(d_free, 0.0);
  EXPECT_LT(d_tied, d_free);
}
