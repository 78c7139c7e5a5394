#include "ptta/multi_source.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>
#include <utility>

namespace ptta::ms {

namespace {

ad::Tensor init_prompt_block(int rows, int d, RngStream& rng) {
  const double r = std::sqrt(6.0 / d);
  std::vector<double> v(static_cast<std::size_t>(rows) * d);
  for (auto& x : v) x = rng.uniform(-r, r);
  return ad::Tensor::from_data({rows, d}, std::move(v), true);
}

}  // namespace

int MultiSourceBundle::domain_index(const std::string& name) const {
  for (std::size_t i = 0; i < domain_names.size(); ++i) {
    if (domain_names[i] == name) return static_cast<int>(i);
  }
  throw std::out_of_range("multi-source: unknown domain '" + name + "'");
}

std::vector<ad::Tensor> MultiSourceBundle::stage_prompts(int domain) const {
  if (domain < 0 || domain >= static_cast<int>(domain_prompts.size())) {
    throw std::out_of_range("multi-source: domain index out of range");
  }
  std::vector<ad::Tensor> out;
  out.reserve(shared_prompts.size());
  for (std::size_t s = 0; s < shared_prompts.size(); ++s) {
    out.push_back(ad::concat({domain_prompts[domain][s], shared_prompts[s]}, 0));
  }
  return out;
}

model::ForwardOutput MultiSourceBundle::forward(const ad::Tensor& images,
                                                int domain) const {
  return model.forward_with_prompts(images, stage_prompts(domain));
}

nn::ParamList MultiSourceBundle::parameters() const {
  nn::ParamList out;
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("prompts.", 0) == 0) continue;
    out.push_back(p);
  }
  for (std::size_t s = 0; s < shared_prompts.size(); ++s) {
    out.push_back({"shared_prompts." + std::to_string(s), shared_prompts[s]});
  }
  for (std::size_t di = 0; di < domain_prompts.size(); ++di) {
    for (std::size_t s = 0; s < domain_prompts[di].size(); ++s) {
      out.push_back({"domain." + domain_names[di] + ".prompts." +
                         std::to_string(s),
                     domain_prompts[di][s]});
    }
  }
  return out;
}

MultiSourceBundle make_bundle(const model::PromptViTConfig& cfg,
                              int domain_prompt_count,
                              std::vector<std::string> domain_names,
                              std::uint64_t seed) {
  cfg.validate();
  if (domain_names.empty()) {
    throw std::invalid_argument("multi-source: need at least one domain");
  }
  {
    std::set<std::string> seen;
    for (const auto& n : domain_names) {
      if (n.empty()) {
        throw std::invalid_argument("multi-source: empty domain name");
      }
      if (!seen.insert(n).second) {
        throw std::invalid_argument("multi-source: duplicate domain '" + n + "'");
      }
    }
  }
  int pd = domain_prompt_count;
  if (pd == 0) pd = cfg.prompts_per_stage / 2;
  if (pd < 1 || pd >= cfg.prompts_per_stage) {
    throw std::invalid_argument(
        "multi-source: domain prompt count must leave at least one shared and "
        "one domain prompt per stage");
  }

  RngStream rng = derive_stream(seed, "multi.init");
  MultiSourceBundle b{cfg, pd, std::move(domain_names),
                      model::PromptViT(cfg, rng), {}, {}};
  const int d = cfg.embed_dim;
  const int ps = cfg.prompts_per_stage - pd;
  b.shared_prompts.reserve(cfg.num_stages);
  for (int s = 0; s < cfg.num_stages; ++s) {
    b.shared_prompts.push_back(init_prompt_block(ps, d, rng));
  }
  b.domain_prompts.resize(b.domain_names.size());
  for (auto& blocks : b.domain_prompts) {
    blocks.reserve(cfg.num_stages);
    for (int s = 0; s < cfg.num_stages; ++s) {
      blocks.push_back(init_prompt_block(pd, d, rng));
    }
  }
  return b;
}

MultiSourceBundle bundle_from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.kind != "multi-source") {
    throw std::invalid_argument("multi-source: checkpoint kind is '" + c.kind +
                                "', expected 'multi-source'");
  }
  if (c.domains.empty()) {
    throw std::invalid_argument("multi-source: checkpoint lists no domains");
  }
  const ad::Tensor& block = c.tensor("domain." + c.domains.front() + ".prompts.0");
  MultiSourceBundle b = make_bundle(c.config, block.dim(0), c.domains, 0);
  ckpt::restore(c, b.parameters());
  return b;
}

TrainMultiResult train_multi_source(const std::vector<data::Dataset>& domains,
                                    const std::vector<std::string>& names,
                                    const model::PromptViTConfig& cfg,
                                    int domain_prompt_count,
                                    const adapt::AdaptationConfig& opt) {
  cfg.validate();
  opt.validate();
  if (domains.empty() || domains.size() != names.size()) {
    throw std::invalid_argument(
        "multi-source: need one name per source domain dataset");
  }
  for (const auto& ds : domains) {
    if (ds.images.empty() || ds.labels.size() != ds.images.size()) {
      throw std::invalid_argument("multi-source: every domain must be labeled");
    }
    if (ds.num_classes != cfg.num_classes) {
      throw std::invalid_argument("multi-source: label space mismatch across domains");
    }
    for (int y : ds.labels) {
      if (y < 0 || y >= cfg.num_classes) {
        throw std::invalid_argument("multi-source: label out of range");
      }
    }
  }

  MultiSourceBundle b = make_bundle(cfg, domain_prompt_count, names, opt.seed);
  nn::SgdMomentum optimizer(b.parameters(), opt.learning_rate, opt.momentum,
                            opt.weight_decay);
  RngStream aug_rng = derive_stream(opt.seed, "multi.augment");

  const int D = static_cast<int>(domains.size());
  std::vector<RngStream> batch_rngs;
  std::vector<std::vector<int>> order(D);
  std::vector<int> pos(D, 0);
  batch_rngs.reserve(D);
  for (int di = 0; di < D; ++di) {
    batch_rngs.push_back(derive_stream(opt.seed, "multi.batch." + names[di]));
    order[di].resize(domains[di].size());
    for (int i = 0; i < static_cast<int>(order[di].size()); ++i) order[di][i] = i;
    batch_rngs[di].shuffle(order[di]);
  }

  TrainMultiResult res;
  res.visit_counts.assign(D, 0);
  for (int step = 0; step < opt.steps; ++step) {
    const int di = step % D;
    const int n = static_cast<int>(order[di].size());
    const int take = std::min(opt.batch_size, n);
    if (pos[di] + take > n) {
      batch_rngs[di].shuffle(order[di]);
      pos[di] = 0;
    }
    std::vector<int> batch(order[di].begin() + pos[di],
                           order[di].begin() + pos[di] + take);
    pos[di] += take;

    std::vector<data::Image> views;
    views.reserve(batch.size());
    for (int i : batch) {
      views.push_back(data::weak_augment(domains[di].images[i], aug_rng));
    }
    std::vector<const data::Image*> ptrs;
    ptrs.reserve(views.size());
    for (const auto& v : views) ptrs.push_back(&v);
    const ad::Tensor images = data::to_tensor(ptrs);

    std::vector<int> ys(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ys[i] = domains[di].labels[batch[i]];
    }

    const double lr =
        opt.schedule == adapt::Schedule::Cosine && opt.steps > 1
            ? opt.learning_rate * 0.5 *
                  (1.0 + std::cos(std::numbers::pi * step / opt.steps))
            : opt.learning_rate;
    optimizer.set_lr(lr);
    const ad::Tensor loss =
        ad::cross_entropy_logits(b.forward(images, di).logits, ys);
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    res.visit_counts[di] += 1;

    metrics::StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.loss_total = loss.item();
    rec.loss_pl = rec.loss_total;
    res.history.push_back(rec);
  }

  res.checkpoint =
      ckpt::capture("multi-source", cfg, opt.seed, b.parameters(), names);
  return res;
}

model::PromptViT init_target_prompts(const MultiSourceBundle& bundle) {
  const auto& cfg = bundle.config;
  RngStream scratch(0);
  model::PromptViT target(cfg, scratch);

  // Backbone and head values come straight from the bundle.
  {
    nn::ParamList src;
    for (const auto& p : bundle.model.parameters()) {
      if (p.name.rfind("prompts.", 0) == 0) continue;
      src.push_back(p);
    }
    nn::ParamList dst;
    for (const auto& p : target.parameters()) {
      if (p.name.rfind("prompts.", 0) == 0) continue;
      dst.push_back(p);
    }
    model::copy_parameters(src, dst);
  }

  const int d = cfg.embed_dim;
  const int pd = bundle.domain_prompt_count;
  const int ps = bundle.shared_prompt_count();
  const double inv_domains = 1.0 / static_cast<double>(bundle.domain_prompts.size());
  for (int s = 0; s < cfg.num_stages; ++s) {
    auto out = target.prompts()[s].raw();
    for (int r = 0; r < pd; ++r) {
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (const auto& blocks : bundle.domain_prompts) {
          acc += blocks[s].data()[static_cast<std::size_t>(r) * d + j];
        }
        out[static_cast<std::size_t>(r) * d + j] = acc * inv_domains;
      }
    }
    const auto shared = bundle.shared_prompts[s].data();
    for (int r = 0; r < ps; ++r) {
      for (int j = 0; j < d; ++j) {
        out[static_cast<std::size_t>(pd + r) * d + j] =
            shared[static_cast<std::size_t>(r) * d + j];
      }
    }
  }
  return target;
}

ckpt::Checkpoint init_target_checkpoint(const MultiSourceBundle& bundle,
                                        std::uint64_t seed) {
  const model::PromptViT target = init_target_prompts(bundle);
  return ckpt::capture("source", bundle.config, seed, target.parameters(),
                       bundle.domain_names);
}

}  // namespace ptta::ms
