#include "doctest.h"

#include "ptta/adaptation.hpp"
#include "ptta/data.hpp"
#include "ptta/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <string>
#include <vector>

using namespace ptta;

namespace {

model::PromptViTConfig tiny_model_config() {
  model::PromptViTConfig mc;
  mc.image_size = 16;
  mc.patch_size = 4;
  mc.in_chans = 3;
  mc.num_layers = 2;
  mc.num_stages = 2;
  mc.prompts_per_stage = 2;
  mc.embed_dim = 16;
  mc.num_heads = 2;
  mc.mlp_ratio = 2.0;
  mc.num_classes = 4;
  return mc;
}

data::DomainShiftSpec toy_spec() {
  data::DomainShiftSpec spec;
  spec.base = data::BaseFamily::Shapes;
  spec.shift = data::ShiftKind::Color;
  spec.severity = 0.7;
  spec.classes = 4;
  spec.per_class_count = 24;
  spec.image_size = 16;
  spec.seed = 5;
  return spec;
}

struct Fixture {
  data::Dataset source_ds;
  data::Dataset target_ds;
  model::PromptViTConfig mc;
  ckpt::Checkpoint source;
  double source_val = 0.0;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.mc = tiny_model_config();
    auto pair = data::make_synthetic_shift(toy_spec());
    out.source_ds = std::move(pair.first);
    out.target_ds = std::move(pair.second);

    adapt::AdaptationConfig opt;
    opt.learning_rate = 2e-2;
    opt.batch_size = 16;
    opt.steps = 400;
    opt.eval_interval = 25;
    opt.seed = 11;
    auto res = adapt::train_source(out.mc, out.source_ds, opt);
    out.source = std::move(res.best);
    out.source_val = res.best_val_accuracy;
    return out;
  }();
  return f;
}

std::vector<double> values(const ckpt::Checkpoint& c, const std::string& name) {
  const auto s = c.tensor(name).data();
  return {s.begin(), s.end()};
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

bool checkpoints_equal(const ckpt::Checkpoint& a, const ckpt::Checkpoint& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& p : a.params) {
    if (!b.has(p.name)) return false;
    if (!same_bits(p.tensor.data(), b.tensor(p.name).data())) return false;
  }
  return true;
}

bool is_adapted_name(const std::string& name) {
  return name.starts_with("prompts.") || name.starts_with("head.");
}

// Softmax regression on raw pixels, full-batch gradient descent. Returns
// the fit accuracy on the training set as a fraction.
double linear_probe_accuracy(const data::Dataset& ds, int iters, double lr) {
  const int n = static_cast<int>(ds.size());
  const int d = static_cast<int>(ds.images[0].pixels.size());
  const int c = ds.num_classes;
  std::vector<double> w(static_cast<std::size_t>(c) * d, 0.0);
  std::vector<double> b(c, 0.0);
  std::vector<double> logits(static_cast<std::size_t>(n) * c);

  const auto forward = [&] {
    for (int i = 0; i < n; ++i) {
      const auto& x = ds.images[i].pixels;
      for (int k = 0; k < c; ++k) {
        double z = b[k];
        const double* wk = &w[static_cast<std::size_t>(k) * d];
        for (int j = 0; j < d; ++j) z += wk[j] * x[j];
        logits[static_cast<std::size_t>(i) * c + k] = z;
      }
    }
  };

  std::vector<double> gw(w.size()), gb(b.size()), p(c);
  for (int it = 0; it < iters; ++it) {
    forward();
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* z = &logits[static_cast<std::size_t>(i) * c];
      const double zmax = *std::max_element(z, z + c);
      double sum = 0.0;
      for (int k = 0; k < c; ++k) sum += (p[k] = std::exp(z[k] - zmax));
      for (int k = 0; k < c; ++k) p[k] /= sum;
      p[ds.labels[i]] -= 1.0;
      const auto& x = ds.images[i].pixels;
      for (int k = 0; k < c; ++k) {
        double* gk = &gw[static_cast<std::size_t>(k) * d];
        for (int j = 0; j < d; ++j) gk[j] += p[k] * x[j];
        gb[k] += p[k];
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * gw[j] / n;
    for (int k = 0; k < c; ++k) b[k] -= lr * gb[k] / n;
  }

  forward();
  int hit = 0;
  for (int i = 0; i < n; ++i) {
    const double* z = &logits[static_cast<std::size_t>(i) * c];
    const int pred =
        static_cast<int>(std::max_element(z, z + c) - z);
    if (pred == ds.labels[i]) ++hit;
  }
  return hit / static_cast<double>(n);
}

}  // namespace

TEST_CASE("the toy source task is linearly separable and the model fits it") {
  const auto& f = fixture();
  CHECK(linear_probe_accuracy(f.source_ds, 400, 0.5) >= 0.95);
  CHECK(f.source_val >= 95.0);
}

TEST_CASE("zero training steps return the fresh initialization") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.steps = 0;
  opt.seed = 7;
  const auto res = adapt::train_source(f.mc, f.source_ds, opt);

  RngStream init = derive_stream(7, "source.init");
  const model::PromptViT fresh(f.mc, init);
  for (const auto& p : fresh.parameters()) {
    CHECK(same_bits(p.tensor.data(), res.best.tensor(p.name).data()));
  }
  CHECK(res.history.empty());
}

TEST_CASE("source training is bitwise reproducible per seed") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 16;
  opt.steps = 10;
  opt.seed = 21;
  const auto a = adapt::train_source(f.mc, f.source_ds, opt);
  const auto b = adapt::train_source(f.mc, f.source_ds, opt);
  CHECK(checkpoints_equal(a.best, b.best));
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss_total == b.history[i].loss_total);
  }

  opt.seed = 22;
  const auto c = adapt::train_source(f.mc, f.source_ds, opt);
  CHECK(!checkpoints_equal(a.best, c.best));
}

TEST_CASE("a checkpoint rebuilds into an identical model") {
  const auto& f = fixture();
  const model::PromptViT m = adapt::make_model(f.source);
  for (const auto& p : m.parameters()) {
    CHECK(same_bits(p.tensor.data(), f.source.tensor(p.name).data()));
  }
}

TEST_CASE("offline adaptation tunes prompts and head, nothing else") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.steps = 6;
  opt.seed = 3;
  const auto res = adapt::adapt_offline(f.source, f.target_ds, opt);

  CHECK(res.updates == 6);
  CHECK(res.history.size() == 6);
  CHECK(!res.diverged);
  CHECK(res.adapted.kind == "adapted");
  CHECK(res.teacher.kind == "teacher");
  for (const auto& p : res.adapted.params) {
    const auto before = f.source.tensor(p.name).data();
    if (is_adapted_name(p.name)) {
      CHECK_MESSAGE(!same_bits(p.tensor.data(), before), p.name);
    } else {
      CHECK_MESSAGE(same_bits(p.tensor.data(), before), p.name);
    }
  }
  CHECK(res.history[0].pl_accuracy.has_value());
}

TEST_CASE("eval cadence fires on the interval and at the final step") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.steps = 3;
  opt.eval_interval = 2;
  opt.seed = 3;
  const auto res = adapt::adapt_offline(f.source, f.target_ds, opt);
  REQUIRE(res.history.size() == 3);
  CHECK(!res.history[0].eval_accuracy.has_value());
  CHECK(res.history[1].eval_accuracy.has_value());
  CHECK(res.history[2].eval_accuracy.has_value());
}

TEST_CASE("the teacher is the exponential moving average of the student") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.schedule = adapt::Schedule::None;
  opt.ema_momentum = 0.5;
  opt.seed = 17;

  opt.steps = 1;
  const auto r1 = adapt::adapt_offline(f.source, f.target_ds, opt);
  opt.steps = 2;
  const auto r2 = adapt::adapt_offline(f.source, f.target_ds, opt);
  opt.steps = 3;
  const auto r3 = adapt::adapt_offline(f.source, f.target_ds, opt);

  const auto close = [](double a, double b) {
    return std::abs(a - b) <= 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
  };

  for (const auto& p : f.source.params) {
    const auto t0 = p.tensor.data();
    const auto s1 = r1.adapted.tensor(p.name).data();
    const auto s2 = r2.adapted.tensor(p.name).data();
    const auto s3 = r3.adapted.tensor(p.name).data();
    const auto t1 = r1.teacher.tensor(p.name).data();
    const auto t2 = r2.teacher.tensor(p.name).data();
    const auto t3 = r3.teacher.tensor(p.name).data();
    for (std::size_t j = 0; j < t0.size(); ++j) {
      CHECK_MESSAGE(close(t1[j], 0.5 * t0[j] + 0.5 * s1[j]), p.name);
      CHECK_MESSAGE(close(t2[j], 0.25 * t0[j] + 0.25 * s1[j] + 0.5 * s2[j]),
                    p.name);
      CHECK_MESSAGE(close(t3[j], 0.5 * t2[j] + 0.5 * s3[j]), p.name);
    }
  }
}

TEST_CASE("all-zero loss weights make adaptation a no-op") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.steps = 5;
  opt.weight_decay = 0.0;
  opt.ema_momentum = 1.0;
  opt.loss_weights = {0.0, 0.0, 0.0, 0.0};
  opt.seed = 9;
  const auto res = adapt::adapt_offline(f.source, f.target_ds, opt);

  CHECK(res.updates == 5);
  CHECK(!res.diverged);
  for (const auto& p : res.adapted.params) {
    CHECK_MESSAGE(same_bits(p.tensor.data(), f.source.tensor(p.name).data()),
                  p.name);
  }
  for (const auto& p : res.teacher.params) {
    CHECK_MESSAGE(same_bits(p.tensor.data(), f.source.tensor(p.name).data()),
                  p.name);
  }
  for (const auto& rec : res.history) CHECK(rec.loss_total == 0.0);
}

TEST_CASE("offline adaptation is bitwise reproducible per seed") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.steps = 5;
  opt.seed = 13;
  const auto a = adapt::adapt_offline(f.source, f.target_ds, opt);
  const auto b = adapt::adapt_offline(f.source, f.target_ds, opt);
  CHECK(checkpoints_equal(a.adapted, b.adapted));
  CHECK(checkpoints_equal(a.teacher, b.teacher));
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss_total == b.history[i].loss_total);
    CHECK(a.history[i].loss_pl == b.history[i].loss_pl);
    CHECK(a.history[i].loss_cls == b.history[i].loss_cls);
  }
}

TEST_CASE("the data ratio subsample is deterministic and changes the run") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.steps = 4;
  opt.data_ratio = 0.25;
  opt.seed = 13;
  const auto a = adapt::adapt_offline(f.source, f.target_ds, opt);
  const auto b = adapt::adapt_offline(f.source, f.target_ds, opt);
  CHECK(checkpoints_equal(a.adapted, b.adapted));

  opt.data_ratio = 1.0;
  const auto c = adapt::adapt_offline(f.source, f.target_ds, opt);
  CHECK(!checkpoints_equal(a.adapted, c.adapted));
}

TEST_CASE("adaptation entry points insist on their own mode") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.mode = adapt::Mode::Online;
  CHECK_THROWS_AS(adapt::adapt_offline(f.source, f.target_ds, opt),
                  std::invalid_argument);
  opt.mode = adapt::Mode::Offline;
  CHECK_THROWS_AS(adapt::adapt_online(f.source, f.target_ds, opt),
                  std::invalid_argument);
}

TEST_CASE("online adaptation: one pass, one update per batch, constant lr, no bank") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.mode = adapt::Mode::Online;
  opt.schedule = adapt::Schedule::Cosine;  // ignored by the online path
  opt.batch_size = 20;
  opt.seed = 29;

  const auto before = pl::bank_push_count();
  const auto res = adapt::adapt_online(f.source, f.target_ds, opt);
  CHECK(pl::bank_push_count() == before);

  const int n = static_cast<int>(f.target_ds.size());
  const int batches = (n + opt.batch_size - 1) / opt.batch_size;
  CHECK(res.updates == batches);
  REQUIRE(static_cast<int>(res.history.size()) == batches);

  double weighted = 0.0;
  for (int i = 0; i < batches; ++i) {
    const auto& rec = res.history[i];
    CHECK(rec.lr == opt.learning_rate);
    REQUIRE(rec.batch_accuracy.has_value());
    CHECK(rec.pl_accuracy == rec.batch_accuracy);
    const int len = std::min(opt.batch_size, n - i * opt.batch_size);
    weighted += *rec.batch_accuracy * len;
  }
  CHECK(res.streaming_accuracy == doctest::Approx(weighted / n).epsilon(1e-12));

  adapt::AdaptationConfig off;
  off.batch_size = 8;
  off.steps = 2;
  off.seed = 29;
  adapt::adapt_offline(f.source, f.target_ds, off);
  CHECK(pl::bank_push_count() > before);
}

TEST_CASE("online pass with zero weights replays the source model exactly") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.mode = adapt::Mode::Online;
  opt.batch_size = 20;
  opt.weight_decay = 0.0;
  opt.loss_weights = {0.0, 0.0, 0.0, 0.0};
  opt.seed = 31;
  const auto res = adapt::adapt_online(f.source, f.target_ds, opt);

  // Updates are no-ops, so every prediction must come from the source
  // model applied to the replayed weak views.
  const model::PromptViT m = adapt::make_model(f.source);
  const int n = static_cast<int>(f.target_ds.size());
  RngStream order_rng = derive_stream(opt.seed, "online.order");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  order_rng.shuffle(order);
  RngStream aug = derive_stream(opt.seed, "online.augment");

  ad::NoGradGuard ng;
  const int c = f.source.config.num_classes;
  int total_hit = 0;
  int step = 0;
  for (int start = 0; start < n; start += opt.batch_size, ++step) {
    const int len = std::min(opt.batch_size, n - start);
    std::vector<data::Image> views;
    views.reserve(len);
    for (int i = 0; i < len; ++i) {
      views.push_back(data::weak_augment(f.target_ds.images[order[start + i]], aug));
    }
    for (int i = 0; i < len; ++i) {
      data::strong_augment(f.target_ds.images[order[start + i]], aug);
    }
    for (int i = 0; i < len; ++i) {
      data::strong_augment(f.target_ds.images[order[start + i]], aug);
    }
    std::vector<const data::Image*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    const auto out = m.forward(data::to_tensor(ptrs));
    const auto z = out.logits.data();
    int hit = 0;
    for (int i = 0; i < len; ++i) {
      const auto row = z.subspan(static_cast<std::size_t>(i) * c, c);
      const int pred = static_cast<int>(
          std::max_element(row.begin(), row.end()) - row.begin());
      if (pred == f.target_ds.labels[order[start + i]]) ++hit;
    }
    total_hit += hit;
    const double acc = 100.0 * hit / static_cast<double>(len);
    REQUIRE(res.history[step].batch_accuracy.has_value());
    CHECK(*res.history[step].batch_accuracy == acc);
  }
  CHECK(res.streaming_accuracy == 100.0 * total_hit / static_cast<double>(n));
}

TEST_CASE("an exploding learning rate trips the divergence guard") {
  const auto& f = fixture();
  adapt::AdaptationConfig opt;
  opt.batch_size = 8;
  opt.steps = 30;
  opt.learning_rate = 1e6;
  opt.loss_weights = {1.0, 0.0, 0.0, 0.0};
  opt.eval_interval = 1000;
  opt.seed = 41;
  const auto res = adapt::adapt_offline(f.source, f.target_ds, opt);
  CHECK(res.diverged);
  CHECK(res.history.size() <= 30);
}

TEST_CASE("evaluation: balanced mean over present classes, absent class is NaN") {
  model::PromptViTConfig mc;
  mc.image_size = 8;
  mc.patch_size = 4;
  mc.num_layers = 1;
  mc.num_stages = 1;
  mc.prompts_per_stage = 1;
  mc.embed_dim = 8;
  mc.num_heads = 2;
  mc.mlp_ratio = 2.0;
  mc.num_classes = 3;
  RngStream r(1);
  model::PromptViT m(mc, r);
  for (auto& p : m.parameters()) {
    auto raw = p.tensor.raw();
    std::fill(raw.begin(), raw.end(), 0.0);
  }
  // Constant classifier: logits equal the head bias for every input.
  m.head().b.raw()[0] = 1.0;

  data::Dataset ds;
  ds.num_classes = 3;
  ds.images.assign(3, data::Image(3, 8, 8));
  ds.labels = {0, 0, 1};

  const auto res = adapt::evaluate(m, ds);
  CHECK(res.per_class_accuracy[0] == 100.0);
  CHECK(res.per_class_accuracy[1] == 0.0);
  CHECK(std::isnan(res.per_class_accuracy[2]));
  CHECK(res.per_class_count == std::vector<int>{2, 1, 0});
  CHECK(res.average_accuracy == 50.0);
  CHECK(res.overall_accuracy == doctest::Approx(200.0 / 3.0));
}

TEST_CASE("the balanced mean weighs unequal classes equally") {
  // Same constant classifier, now with 4 vs 2 samples: the sample-weighted
  // accuracy moves with the imbalance, the balanced mean does not.
  model::PromptViTConfig mc;
  mc.image_size = 8;
  mc.patch_size = 4;
  mc.num_layers = 1;
  mc.num_stages = 1;
  mc.prompts_per_stage = 1;
  mc.embed_dim = 8;
  mc.num_heads = 2;
  mc.mlp_ratio = 2.0;
  mc.num_classes = 2;
  RngStream r(1);
  model::PromptViT m(mc, r);
  for (auto& p : m.parameters()) {
    auto raw = p.tensor.raw();
    std::fill(raw.begin(), raw.end(), 0.0);
  }
  m.head().b.raw()[0] = 1.0;

  data::Dataset ds;
  ds.num_classes = 2;
  ds.images.assign(6, data::Image(3, 8, 8));
  ds.labels = {0, 0, 0, 0, 1, 1};

  const auto res = adapt::evaluate(m, ds);
  CHECK(res.average_accuracy == 50.0);
  CHECK(res.overall_accuracy == doctest::Approx(400.0 / 6.0));
}

TEST_CASE("stratified split: disjoint, complete, at least one per class") {
  const auto& f = fixture();
  RngStream rng = derive_stream(99, "source.split");
  const auto split = adapt::stratified_split(f.source_ds, 0.1, rng);

  const int n = static_cast<int>(f.source_ds.size());
  CHECK(static_cast<int>(split.train.size() + split.val.size()) == n);
  std::set<int> seen(split.train.begin(), split.train.end());
  for (int i : split.val) CHECK(seen.insert(i).second);
  CHECK(static_cast<int>(seen.size()) == n);

  std::vector<int> val_per_class(f.source_ds.num_classes, 0);
  for (int i : split.val) val_per_class[f.source_ds.labels[i]] += 1;
  for (int k = 0; k < f.source_ds.num_classes; ++k) {
    CHECK(val_per_class[k] >= 1);
  }

  RngStream rng2 = derive_stream(99, "source.split");
  const auto split2 = adapt::stratified_split(f.source_ds, 0.1, rng2);
  CHECK(split.train == split2.train);
  CHECK(split.val == split2.val);
}

TEST_CASE("ablation switches map onto the loss and bank flags") {
  adapt::AdaptationConfig base;
  base.loss_weights = {1.0, 0.4, 0.3, 0.02};
  base.use_bank = true;

  const auto pl_only =
      adapt::ablation_config(base, adapt::AblationVariant::PseudoLabelOnly);
  CHECK(!pl_only.use_bank);
  CHECK(pl_only.loss_weights == ssl::LossWeights{1.0, 0.0, 0.0, 0.0});

  const auto with_bank =
      adapt::ablation_config(base, adapt::AblationVariant::PseudoLabelBank);
  CHECK(with_bank.use_bank);
  CHECK(with_bank.loss_weights == ssl::LossWeights{1.0, 0.0, 0.0, 0.0});

  const auto with_cls =
      adapt::ablation_config(base, adapt::AblationVariant::PseudoLabelBankCls);
  CHECK(with_cls.use_bank);
  CHECK(with_cls.loss_weights == ssl::LossWeights{1.0, 0.4, 0.0, 0.0});

  const auto full = adapt::ablation_config(base, adapt::AblationVariant::Full);
  CHECK(full.use_bank);
  CHECK(full.loss_weights == base.loss_weights);

  CHECK(adapt::ablation_name(adapt::AblationVariant::PseudoLabelOnly) == "pl");
  CHECK(adapt::ablation_name(adapt::AblationVariant::PseudoLabelBank) == "pl+mb");
  CHECK(adapt::ablation_name(adapt::AblationVariant::PseudoLabelBankCls) ==
        "pl+mb+cls");
  CHECK(adapt::ablation_name(adapt::AblationVariant::Full) == "full");
}

TEST_CASE("the ablation harness produces one row per variant") {
  const auto& f = fixture();
  adapt::AdaptationConfig base;
  base.batch_size = 8;
  base.steps = 2;
  base.eval_interval = 10;
  base.seed = 3;
  const auto rows = adapt::run_ablation(f.source, f.target_ds, base);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].name == "pl");
  CHECK(rows[1].name == "pl+mb");
  CHECK(rows[2].name == "pl+mb+cls");
  CHECK(rows[3].name == "full");
  for (const auto& row : rows) {
    CHECK(!row.diverged);
    CHECK(row.accuracy >= 0.0);
    CHECK(row.accuracy <= 100.0);
  }
}
