#include "ptta/adaptation.hpp"

#include "ptta/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace ptta::adapt {

namespace {

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

data::Dataset take(const data::Dataset& ds, std::span<const int> idx) {
  data::Dataset out;
  out.num_classes = ds.num_classes;
  out.images.reserve(idx.size());
  const bool labeled = !ds.labels.empty();
  if (labeled) out.labels.reserve(idx.size());
  for (int i : idx) {
    out.images.push_back(ds.images[i]);
    if (labeled) out.labels.push_back(ds.labels[i]);
  }
  return out;
}

// Epoch-shuffled minibatch order; a fresh shuffle whenever the remaining
// tail is shorter than a batch. Null rng keeps the order fixed.
class BatchSampler {
 public:
  BatchSampler(std::vector<int> indices, int batch_size, RngStream* rng)
      : idx_(std::move(indices)),
        bsz_(std::min<int>(batch_size, static_cast<int>(idx_.size()))),
        rng_(rng) {
    if (idx_.empty()) throw std::invalid_argument("sampler: empty index set");
    if (rng_) rng_->shuffle(idx_);
  }

  std::vector<int> next() {
    if (pos_ + bsz_ > static_cast<int>(idx_.size())) {
      if (rng_) rng_->shuffle(idx_);
      pos_ = 0;
    }
    std::vector<int> out(idx_.begin() + pos_, idx_.begin() + pos_ + bsz_);
    pos_ += bsz_;
    return out;
  }

 private:
  std::vector<int> idx_;
  int bsz_;
  int pos_ = 0;
  RngStream* rng_;
};

double scheduled_lr(const AdaptationConfig& opt, int step) {
  if (opt.schedule == Schedule::None || opt.steps <= 1) {
    return opt.learning_rate;
  }
  const double t = static_cast<double>(step) / static_cast<double>(opt.steps);
  return opt.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

ad::Tensor augment_batch(const data::Dataset& ds, std::span<const int> idx,
                         RngStream& rng, bool strong) {
  std::vector<data::Image> views;
  views.reserve(idx.size());
  for (int i : idx) {
    views.push_back(strong ? data::strong_augment(ds.images[i], rng)
                           : data::weak_augment(ds.images[i], rng));
  }
  std::vector<const data::Image*> ptrs;
  ptrs.reserve(views.size());
  for (const auto& v : views) ptrs.push_back(&v);
  return data::to_tensor(ptrs);
}

void check_backbone_frozen(const model::PromptViT& m,
                           const ckpt::Checkpoint& src) {
  for (const auto& p : m.parameters()) {
    if (p.tensor.requires_grad()) continue;
    const auto stored = src.tensor(p.name).data();
    const auto live = p.tensor.data();
    if (stored.size() != live.size() ||
        std::memcmp(stored.data(), live.data(),
                    sizeof(double) * stored.size()) != 0) {
      throw std::logic_error("adaptation: frozen parameter '" + p.name +
                             "' drifted from the source checkpoint");
    }
  }
}

struct TeacherStudent {
  model::PromptViT student;
  model::PromptViT teacher;
  ssl::ProjectionHeads s_heads;
  ssl::ProjectionHeads t_heads;
  nn::ParamList ema_student;  // model + projection heads, aligned
  nn::ParamList ema_teacher;
};

TeacherStudent build_pair(const ckpt::Checkpoint& source,
                          const AdaptationConfig& opt) {
  model::PromptViT student = make_model(source);
  model::PromptViT teacher = make_model(source);
  student.freeze_for_adaptation();
  for (auto& p : teacher.parameters()) p.tensor.set_requires_grad(false);

  const auto& cfg = source.config;
  RngStream proj_rng = derive_stream(opt.seed, "adapt.proj_init");
  ssl::ProjectionHeads s_heads(cfg.embed_dim, opt.proj_dim, cfg.num_stages,
                               proj_rng);
  RngStream scratch_rng(0);
  ssl::ProjectionHeads t_heads(cfg.embed_dim, opt.proj_dim, cfg.num_stages,
                               scratch_rng);
  model::copy_parameters(s_heads.parameters(), t_heads.parameters());
  s_heads.set_requires_grad(true);
  t_heads.set_requires_grad(false);

  TeacherStudent ts{std::move(student), std::move(teacher), std::move(s_heads),
                    std::move(t_heads), {}, {}};
  ts.ema_student = ts.student.parameters();
  for (const auto& p : ts.s_heads.parameters()) ts.ema_student.push_back(p);
  ts.ema_teacher = ts.teacher.parameters();
  for (const auto& p : ts.t_heads.parameters()) ts.ema_teacher.push_back(p);
  return ts;
}

struct LossBreakdown {
  ad::Tensor total;
  double pl = 0.0, cls = 0.0, prompt = 0.0, div = 0.0;
  double pl_accuracy = -1.0;  // percent; negative when unknown
};

// One optimization step's loss graph: pseudo-labeling on the strong student
// view plus the hierarchical self-supervised terms. `pseudo` may be empty
// when alpha is zero.
LossBreakdown build_losses(TeacherStudent& ts, const AdaptationConfig& opt,
                           ssl::DinoCenterState& center, int step,
                           const ad::Tensor& strong1,
                           const ad::Tensor& strong2,
                           std::span<const int> pseudo) {
  const auto& w = opt.loss_weights;
  const bool need_pl = w.alpha != 0.0;
  const bool need_cls = w.beta1 != 0.0;
  const bool need_prompt = w.beta2 != 0.0;
  const bool need_div = w.lambda != 0.0;

  LossBreakdown out{ad::Tensor::scalar(0.0)};
  ad::Tensor l_pl = ad::Tensor::scalar(0.0);
  ad::Tensor l_cls = ad::Tensor::scalar(0.0);
  ad::Tensor l_prompt = ad::Tensor::scalar(0.0);
  ad::Tensor l_div = ad::Tensor::scalar(0.0);

  if (need_pl || need_cls || need_prompt || need_div) {
    model::ForwardOutput s_out = ts.student.forward(strong1);
    if (need_pl) {
      l_pl = pl::pseudo_label_loss(s_out.logits, pseudo);
    }
    ssl::ProjectionHeads::Projected s_proj;
    if (need_cls || need_prompt || need_div) {
      s_proj = ts.s_heads.project(s_out.cls_feature, s_out.aggregated_prompts);
    }

    std::vector<double> teacher_cls;
    std::vector<std::vector<double>> teacher_prompts;
    if (need_cls || need_prompt) {
      ad::NoGradGuard ng;
      model::ForwardOutput t_out = ts.teacher.forward(strong2);
      auto t_proj = ts.t_heads.project(t_out.cls_feature,
                                       t_out.aggregated_prompts);
      if (need_cls) {
        const auto raw = t_proj.cls_proj.data();
        teacher_cls.assign(raw.begin(), raw.end());
      }
      if (need_prompt) {
        teacher_prompts.reserve(t_proj.prompt_projs.size());
        for (const auto& sp : t_proj.prompt_projs) {
          const auto raw = sp.data();
          teacher_prompts.emplace_back(raw.begin(), raw.end());
        }
      }
    }

    if (need_cls) {
      const int rows = strong1.dim(0);
      const double temp = center.teacher_temp(step, opt.steps);
      const std::vector<double> t_probs =
          ssl::sharpen_center_teacher(teacher_cls, opt.proj_dim, center, temp);
      l_cls = ssl::dino_cls_loss_from_logits(t_probs, s_proj.cls_proj,
                                             center.student_temp);
      ssl::update_center(center, teacher_cls, rows);
    }
    if (need_prompt) {
      l_prompt = ssl::prompt_alignment_loss(s_proj.prompt_projs,
                                            teacher_prompts);
    }
    if (need_div) {
      l_div = ssl::prompt_diversity_loss(s_proj.prompt_projs);
    }
  }

  out.total = ssl::total_loss(l_pl, l_cls, l_prompt, l_div, w);
  out.pl = l_pl.item();
  out.cls = l_cls.item();
  out.prompt = l_prompt.item();
  out.div = l_div.item();
  return out;
}

bool diverged_from(double initial_total, double total) {
  if (!std::isfinite(total)) return true;
  const double limit = 10.0 * std::max(std::abs(initial_total), 1e-6);
  return total > limit;
}

}  // namespace

Schedule schedule_from_string(const std::string& s) {
  if (s == "cosine") return Schedule::Cosine;
  if (s == "none") return Schedule::None;
  throw std::invalid_argument("schedule must be 'cosine' or 'none', got '" + s + "'");
}

Mode mode_from_string(const std::string& s) {
  if (s == "offline") return Mode::Offline;
  if (s == "online") return Mode::Online;
  throw std::invalid_argument("mode must be 'offline' or 'online', got '" + s + "'");
}

std::string schedule_to_string(Schedule s) {
  return s == Schedule::Cosine ? "cosine" : "none";
}

std::string mode_to_string(Mode m) {
  return m == Mode::Offline ? "offline" : "online";
}

void AdaptationConfig::validate() const {
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("adaptation config: learning_rate must be > 0");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("adaptation config: momentum must be in [0, 1)");
  }
  if (weight_decay < 0.0) {
    throw std::invalid_argument("adaptation config: weight_decay must be >= 0");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("adaptation config: batch_size must be >= 1");
  }
  if (steps < 0) {
    throw std::invalid_argument("adaptation config: steps must be >= 0");
  }
  if (top_k < 1) {
    throw std::invalid_argument("adaptation config: top_k must be >= 1");
  }
  if (bank_capacity < 0) {
    throw std::invalid_argument("adaptation config: bank_capacity must be >= 0");
  }
  if (ema_momentum < 0.0 || ema_momentum > 1.0) {
    throw std::invalid_argument("adaptation config: ema_momentum must be in [0, 1]");
  }
  if (!(data_ratio > 0.0) || data_ratio > 1.0) {
    throw std::invalid_argument("adaptation config: data_ratio must be in (0, 1]");
  }
  if (proj_dim < 1) {
    throw std::invalid_argument("adaptation config: proj_dim must be >= 1");
  }
  if (eval_interval < 1) {
    throw std::invalid_argument("adaptation config: eval_interval must be >= 1");
  }
  if (eval_subset < 0) {
    throw std::invalid_argument("adaptation config: eval_subset must be >= 0");
  }
  loss_weights.validate();
}

EvalResult evaluate(const model::PromptViT& m, const data::Dataset& ds,
                    int batch_size) {
  if (ds.images.empty()) {
    throw std::invalid_argument("evaluate: empty dataset");
  }
  if (ds.labels.size() != ds.images.size()) {
    throw std::invalid_argument("evaluate: dataset must be labeled");
  }
  const int c = m.config().num_classes;
  for (int y : ds.labels) {
    if (y < 0 || y >= c) {
      throw std::invalid_argument("evaluate: label out of range");
    }
  }

  EvalResult res;
  res.per_class_count.assign(c, 0);
  std::vector<int> correct(c, 0);

  ad::NoGradGuard ng;
  const int n = static_cast<int>(ds.images.size());
  for (int start = 0; start < n; start += batch_size) {
    const int len = std::min(batch_size, n - start);
    std::vector<int> idx(len);
    for (int i = 0; i < len; ++i) idx[i] = start + i;
    const ad::Tensor logits = m.forward(data::to_tensor(ds, idx)).logits;
    const auto values = logits.data();
    for (int i = 0; i < len; ++i) {
      const int pred = argmax_row(values.subspan(
          static_cast<std::size_t>(i) * c, static_cast<std::size_t>(c)));
      const int label = ds.labels[start + i];
      res.per_class_count[label] += 1;
      if (pred == label) correct[label] += 1;
    }
  }

  res.per_class_accuracy.assign(c, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int present = 0;
  int total_correct = 0;
  for (int k = 0; k < c; ++k) {
    if (res.per_class_count[k] == 0) {
      std::cerr << "warning: class " << k
                << " absent from eval set, excluded from the balanced mean\n";
      continue;
    }
    res.per_class_accuracy[k] =
        100.0 * correct[k] / static_cast<double>(res.per_class_count[k]);
    sum += res.per_class_accuracy[k];
    present += 1;
    total_correct += correct[k];
  }
  res.average_accuracy = present > 0 ? sum / present : 0.0;
  res.overall_accuracy = 100.0 * total_correct / static_cast<double>(n);
  return res;
}

model::PromptViT make_model(const ckpt::Checkpoint& c) {
  RngStream scratch(0);
  model::PromptViT m(c.config, scratch);
  ckpt::restore(c, m.parameters());
  return m;
}

SplitIndices stratified_split(const data::Dataset& ds, double val_fraction,
                              RngStream& rng) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw std::invalid_argument("split: val_fraction must be in [0, 1)");
  }
  std::vector<std::vector<int>> by_class(ds.num_classes);
  for (int i = 0; i < static_cast<int>(ds.labels.size()); ++i) {
    const int y = ds.labels[i];
    if (y < 0 || y >= ds.num_classes) {
      throw std::invalid_argument("split: label out of range");
    }
    by_class[y].push_back(i);
  }
  SplitIndices out;
  for (auto& members : by_class) {
    rng.shuffle(members);
    const int nc = static_cast<int>(members.size());
    int nv = static_cast<int>(std::llround(val_fraction * nc));
    if (val_fraction > 0.0 && nc >= 2) nv = std::clamp(nv, 1, nc - 1);
    else nv = std::min(nv, std::max(0, nc - 1));
    for (int i = 0; i < nc; ++i) {
      (i < nv ? out.val : out.train).push_back(members[i]);
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

TrainSourceResult train_source(const model::PromptViTConfig& cfg,
                               const data::Dataset& labeled,
                               const AdaptationConfig& opt) {
  cfg.validate();
  opt.validate();
  if (labeled.images.empty()) {
    throw std::invalid_argument("source training: empty dataset");
  }
  if (labeled.labels.size() != labeled.images.size()) {
    throw std::invalid_argument("source training: dataset must be labeled");
  }
  for (int y : labeled.labels) {
    if (y < 0 || y >= cfg.num_classes) {
      throw std::invalid_argument("source training: label out of range");
    }
  }

  RngStream split_rng = derive_stream(opt.seed, "source.split");
  const SplitIndices split = stratified_split(labeled, 0.1, split_rng);
  const data::Dataset val = take(labeled, split.val);

  RngStream init_rng = derive_stream(opt.seed, "source.init");
  model::PromptViT m(cfg, init_rng);
  m.set_all_trainable();

  TrainSourceResult res;
  res.best = ckpt::capture("source", cfg, opt.seed, m.parameters());
  res.best_val_accuracy =
      val.images.empty() ? 0.0 : evaluate(m, val).average_accuracy;
  if (opt.steps == 0) return res;

  nn::SgdMomentum optimizer(m.parameters(), opt.learning_rate, opt.momentum,
                            opt.weight_decay);
  RngStream batch_rng = derive_stream(opt.seed, "source.batch");
  RngStream aug_rng = derive_stream(opt.seed, "source.augment");
  BatchSampler sampler(split.train, opt.batch_size, &batch_rng);

  for (int step = 0; step < opt.steps; ++step) {
    optimizer.set_lr(scheduled_lr(opt, step));
    const std::vector<int> batch = sampler.next();
    const ad::Tensor images = augment_batch(labeled, batch, aug_rng, false);
    std::vector<int> ys(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) ys[i] = labeled.labels[batch[i]];

    const ad::Tensor loss = ad::cross_entropy_logits(m.forward(images).logits, ys);
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();

    metrics::StepRecord rec;
    rec.step = step;
    rec.lr = optimizer.lr();
    rec.loss_total = loss.item();
    rec.loss_pl = rec.loss_total;
    if (!val.images.empty() &&
        ((step + 1) % opt.eval_interval == 0 || step + 1 == opt.steps)) {
      const double acc = evaluate(m, val).average_accuracy;
      rec.eval_accuracy = acc;
      if (acc >= res.best_val_accuracy) {
        res.best_val_accuracy = acc;
        res.best = ckpt::capture("source", cfg, opt.seed, m.parameters());
      }
    }
    res.history.push_back(rec);
  }
  return res;
}

AdaptResult adapt_offline(const ckpt::Checkpoint& source,
                          const data::Dataset& target,
                          const AdaptationConfig& opt) {
  opt.validate();
  if (opt.mode != Mode::Offline) {
    throw std::invalid_argument("adapt_offline: config mode must be offline");
  }
  if (target.images.empty()) {
    throw std::invalid_argument("adaptation: empty target set");
  }
  const bool labeled = target.labels.size() == target.images.size();
  const auto& cfg = source.config;
  const auto& w = opt.loss_weights;

  TeacherStudent ts = build_pair(source, opt);
  nn::ParamList tunable = ts.student.trainable_parameters();
  for (const auto& p : ts.s_heads.parameters()) tunable.push_back(p);
  nn::SgdMomentum optimizer(tunable, opt.learning_rate, opt.momentum,
                            opt.weight_decay);

  const int n = static_cast<int>(target.images.size());
  RngStream sub_rng = derive_stream(opt.seed, "adapt.subsample");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  sub_rng.shuffle(order);
  const int keep = std::clamp<int>(
      static_cast<int>(std::llround(opt.data_ratio * n)), 1, n);
  std::vector<int> working(order.begin(), order.begin() + keep);

  const bool need_pl = w.alpha != 0.0;
  const bool need_bank = opt.use_bank && need_pl;
  const int capacity = opt.bank_capacity > 0
                           ? opt.bank_capacity
                           : std::min<int>(keep, 2048);
  pl::MemoryBank bank(capacity, cfg.embed_dim, cfg.num_classes);
  if (need_bank) {
    ad::NoGradGuard ng;
    const int warm = std::min<int>(capacity, keep);
    for (int start = 0; start < warm; start += 64) {
      const int len = std::min(64, warm - start);
      std::vector<int> idx(working.begin() + start,
                           working.begin() + start + len);
      const model::ForwardOutput out =
          ts.teacher.forward(data::to_tensor(target, idx));
      const ad::Tensor probs = ad::softmax_lastdim(out.logits);
      const auto f = out.cls_feature.data();
      const auto p = probs.data();
      for (int i = 0; i < len; ++i) {
        bank.push(f.subspan(static_cast<std::size_t>(i) * cfg.embed_dim,
                            cfg.embed_dim),
                  p.subspan(static_cast<std::size_t>(i) * cfg.num_classes,
                            cfg.num_classes));
      }
    }
  }

  std::vector<int> eval_idx;
  const int eval_n = opt.eval_subset > 0 ? std::min(opt.eval_subset, n) : n;
  for (int i = 0; i < eval_n; ++i) eval_idx.push_back(i);
  const data::Dataset eval_slice =
      labeled ? take(target, eval_idx) : data::Dataset{};

  ssl::DinoCenterState center(opt.proj_dim);
  RngStream batch_rng = derive_stream(opt.seed, "adapt.batch");
  RngStream aug_rng = derive_stream(opt.seed, "adapt.augment");
  BatchSampler sampler(working, opt.batch_size, &batch_rng);

  AdaptResult res;
  double initial_total = 0.0;
  for (int step = 0; step < opt.steps; ++step) {
    optimizer.set_lr(scheduled_lr(opt, step));
    const std::vector<int> batch = sampler.next();
    const int b = static_cast<int>(batch.size());

    const ad::Tensor weak = augment_batch(target, batch, aug_rng, false);
    const ad::Tensor strong1 = augment_batch(target, batch, aug_rng, true);
    const ad::Tensor strong2 = augment_batch(target, batch, aug_rng, true);

    std::vector<int> pseudo;
    double pl_accuracy = -1.0;
    if (need_pl) {
      ad::NoGradGuard ng;
      const model::ForwardOutput out = ts.student.forward(weak);
      pseudo.resize(b);
      if (opt.use_bank) {
        const auto f = out.cls_feature.data();
        for (int i = 0; i < b; ++i) {
          pseudo[i] = bank
                          .soft_vote(f.subspan(static_cast<std::size_t>(i) *
                                                   cfg.embed_dim,
                                               cfg.embed_dim),
                                     opt.top_k)
                          .label;
        }
      } else {
        const auto z = out.logits.data();
        for (int i = 0; i < b; ++i) {
          pseudo[i] = argmax_row(z.subspan(
              static_cast<std::size_t>(i) * cfg.num_classes, cfg.num_classes));
        }
      }
      if (labeled) {
        int hit = 0;
        for (int i = 0; i < b; ++i) {
          if (pseudo[i] == target.labels[batch[i]]) ++hit;
        }
        pl_accuracy = 100.0 * hit / static_cast<double>(b);
      }
    }

    if (need_bank) {
      ad::NoGradGuard ng;
      const model::ForwardOutput out = ts.teacher.forward(weak);
      const ad::Tensor probs = ad::softmax_lastdim(out.logits);
      const auto f = out.cls_feature.data();
      const auto p = probs.data();
      for (int i = 0; i < b; ++i) {
        bank.push(f.subspan(static_cast<std::size_t>(i) * cfg.embed_dim,
                            cfg.embed_dim),
                  p.subspan(static_cast<std::size_t>(i) * cfg.num_classes,
                            cfg.num_classes));
      }
    }

    LossBreakdown losses =
        build_losses(ts, opt, center, step, strong1, strong2, pseudo);
    optimizer.zero_grad();
    losses.total.backward();
    optimizer.step();
    res.updates += 1;
    pl::ema_update(ts.ema_teacher, ts.ema_student, opt.ema_momentum);

    metrics::StepRecord rec;
    rec.step = step;
    rec.lr = optimizer.lr();
    rec.loss_total = losses.total.item();
    rec.loss_pl = losses.pl;
    rec.loss_cls = losses.cls;
    rec.loss_prompt = losses.prompt;
    rec.loss_div = losses.div;
    if (pl_accuracy >= 0.0) rec.pl_accuracy = pl_accuracy;

    if (step == 0) initial_total = rec.loss_total;
    const bool cadence =
        (step + 1) % opt.eval_interval == 0 || step + 1 == opt.steps;
    if (cadence) {
      check_backbone_frozen(ts.student, source);
      if (!eval_slice.images.empty()) {
        rec.eval_accuracy = evaluate(ts.student, eval_slice).average_accuracy;
      }
    }
    res.history.push_back(rec);

    if (diverged_from(initial_total, rec.loss_total)) {
      res.diverged = true;
      break;
    }
  }

  res.adapted = ckpt::capture("adapted", cfg, opt.seed,
                              ts.student.parameters(), source.domains);
  res.teacher = ckpt::capture("teacher", cfg, opt.seed,
                              ts.teacher.parameters(), source.domains);
  return res;
}

AdaptResult adapt_online(const ckpt::Checkpoint& source,
                         const data::Dataset& target_stream,
                         const AdaptationConfig& opt) {
  opt.validate();
  if (opt.mode != Mode::Online) {
    throw std::invalid_argument("adapt_online: config mode must be online");
  }
  if (target_stream.images.empty()) {
    throw std::invalid_argument("adaptation: empty target set");
  }
  const bool labeled =
      target_stream.labels.size() == target_stream.images.size();
  const auto& cfg = source.config;

  TeacherStudent ts = build_pair(source, opt);
  nn::ParamList tunable = ts.student.trainable_parameters();
  for (const auto& p : ts.s_heads.parameters()) tunable.push_back(p);
  nn::SgdMomentum optimizer(tunable, opt.learning_rate, opt.momentum,
                            opt.weight_decay);

  const int n = static_cast<int>(target_stream.images.size());
  RngStream order_rng = derive_stream(opt.seed, "online.order");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  order_rng.shuffle(order);

  ssl::DinoCenterState center(opt.proj_dim);
  RngStream aug_rng = derive_stream(opt.seed, "online.augment");
  const int num_batches = (n + opt.batch_size - 1) / opt.batch_size;

  AdaptResult res;
  int seen = 0;
  int correct = 0;
  double initial_total = 0.0;
  for (int step = 0; step < num_batches; ++step) {
    const int start = step * opt.batch_size;
    const int len = std::min(opt.batch_size, n - start);
    const std::vector<int> batch(order.begin() + start,
                                 order.begin() + start + len);

    const ad::Tensor weak = augment_batch(target_stream, batch, aug_rng, false);
    const ad::Tensor strong1 =
        augment_batch(target_stream, batch, aug_rng, true);
    const ad::Tensor strong2 =
        augment_batch(target_stream, batch, aug_rng, true);

    std::vector<int> pseudo(len);
    {
      ad::NoGradGuard ng;
      const model::ForwardOutput out = ts.student.forward(weak);
      const auto z = out.logits.data();
      for (int i = 0; i < len; ++i) {
        pseudo[i] = argmax_row(z.subspan(
            static_cast<std::size_t>(i) * cfg.num_classes, cfg.num_classes));
      }
    }
    double batch_accuracy = -1.0;
    if (labeled) {
      int hit = 0;
      for (int i = 0; i < len; ++i) {
        if (pseudo[i] == target_stream.labels[batch[i]]) ++hit;
      }
      batch_accuracy = 100.0 * hit / static_cast<double>(len);
      seen += len;
      correct += hit;
    }

    LossBreakdown losses =
        build_losses(ts, opt, center, step, strong1, strong2, pseudo);
    optimizer.zero_grad();
    losses.total.backward();
    optimizer.step();
    res.updates += 1;
    pl::ema_update(ts.ema_teacher, ts.ema_student, opt.ema_momentum);

    metrics::StepRecord rec;
    rec.step = step;
    rec.lr = optimizer.lr();
    rec.loss_total = losses.total.item();
    rec.loss_pl = losses.pl;
    rec.loss_cls = losses.cls;
    rec.loss_prompt = losses.prompt;
    rec.loss_div = losses.div;
    if (batch_accuracy >= 0.0) {
      rec.batch_accuracy = batch_accuracy;
      rec.pl_accuracy = batch_accuracy;
    }
    if (step == 0) initial_total = rec.loss_total;
    if ((step + 1) % opt.eval_interval == 0 || step + 1 == num_batches) {
      check_backbone_frozen(ts.student, source);
    }
    res.history.push_back(rec);
    if (diverged_from(initial_total, rec.loss_total)) {
      res.diverged = true;
      break;
    }
  }

  res.streaming_accuracy =
      seen > 0 ? 100.0 * correct / static_cast<double>(seen) : 0.0;
  res.adapted = ckpt::capture("adapted", cfg, opt.seed,
                              ts.student.parameters(), source.domains);
  res.teacher = ckpt::capture("teacher", cfg, opt.seed,
                              ts.teacher.parameters(), source.domains);
  return res;
}

std::string ablation_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::PseudoLabelOnly: return "pl";
    case AblationVariant::PseudoLabelBank: return "pl+mb";
    case AblationVariant::PseudoLabelBankCls: return "pl+mb+cls";
    case AblationVariant::Full: return "full";
  }
  throw std::logic_error("unknown ablation variant");
}

AdaptationConfig ablation_config(AdaptationConfig base, AblationVariant v) {
  switch (v) {
    case AblationVariant::PseudoLabelOnly:
      base.use_bank = false;
      base.loss_weights.beta1 = 0.0;
      base.loss_weights.beta2 = 0.0;
      base.loss_weights.lambda = 0.0;
      break;
    case AblationVariant::PseudoLabelBank:
      base.use_bank = true;
      base.loss_weights.beta1 = 0.0;
      base.loss_weights.beta2 = 0.0;
      base.loss_weights.lambda = 0.0;
      break;
    case AblationVariant::PseudoLabelBankCls:
      base.use_bank = true;
      base.loss_weights.beta2 = 0.0;
      base.loss_weights.lambda = 0.0;
      break;
    case AblationVariant::Full:
      break;
  }
  return base;
}

std::vector<AblationRow> run_ablation(const ckpt::Checkpoint& source,
                                      const data::Dataset& target,
                                      const AdaptationConfig& base) {
  std::vector<AblationRow> rows;
  for (AblationVariant v :
       {AblationVariant::PseudoLabelOnly, AblationVariant::PseudoLabelBank,
        AblationVariant::PseudoLabelBankCls, AblationVariant::Full}) {
    const AdaptationConfig cfg = ablation_config(base, v);
    const AdaptResult run = adapt_offline(source, target, cfg);
    const model::PromptViT adapted = make_model(run.adapted);
    AblationRow row;
    row.name = ablation_name(v);
    row.accuracy = evaluate(adapted, target).average_accuracy;
    row.diverged = run.diverged;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ptta::adapt
