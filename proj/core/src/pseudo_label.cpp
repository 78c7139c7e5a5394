#include "ptta/pseudo_label.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace ptta::pl {

namespace {
std::uint64_t g_push_count = 0;
}  // namespace

std::uint64_t bank_push_count() { return g_push_count; }

void ema_update(const nn::ParamList& teacher, const nn::ParamList& student,
                double m_ema) {
  if (m_ema < 0.0 || m_ema > 1.0) {
    throw std::invalid_argument("ema_update: momentum outside [0,1]");
  }
  if (teacher.size() != student.size()) {
    throw std::invalid_argument("ema_update: parameter list length mismatch");
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].name != student[i].name ||
        teacher[i].tensor.shape() != student[i].tensor.shape()) {
      throw std::invalid_argument("ema_update: mismatch at " +
                                  teacher[i].name + " vs " + student[i].name);
    }
    auto t = const_cast<nn::NamedParam&>(teacher[i]).tensor.raw();
    const auto s = student[i].tensor.data();
    for (std::size_t j = 0; j < t.size(); ++j) {
      t[j] = m_ema * t[j] + (1.0 - m_ema) * s[j];
    }
  }
}

MemoryBank::MemoryBank(int capacity, int feature_dim, int num_classes)
    : capacity_(capacity), d_(feature_dim), c_(num_classes) {
  if (capacity < 1) throw std::invalid_argument("bank: capacity must be >= 1");
  if (feature_dim < 1 || num_classes < 2) {
    throw std::invalid_argument("bank: bad feature or class dimension");
  }
  features_.assign(static_cast<std::size_t>(capacity_) * d_, 0.0);
  probs_.assign(static_cast<std::size_t>(capacity_) * c_, 0.0);
}

void MemoryBank::push(std::span<const double> feature,
                      std::span<const double> probs) {
  if (static_cast<int>(feature.size()) != d_) {
    throw std::invalid_argument("bank: feature dim mismatch");
  }
  if (static_cast<int>(probs.size()) != c_) {
    throw std::invalid_argument("bank: class dim mismatch");
  }
  double nrm = 0.0;
  for (const double v : feature) nrm += v * v;
  nrm = std::sqrt(nrm);
  const double inv = 1.0 / std::max(nrm, ad::kCosineEps);
  double* f = features_.data() + static_cast<std::size_t>(cursor_) * d_;
  for (int j = 0; j < d_; ++j) f[j] = feature[j] * inv;
  double* p = probs_.data() + static_cast<std::size_t>(cursor_) * c_;
  std::copy(probs.begin(), probs.end(), p);
  cursor_ = (cursor_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
  ++g_push_count;
  ++pushed_;
}

int MemoryBank::physical_index(int logical) const {
  if (logical < 0 || logical >= size_) {
    throw std::out_of_range("bank: logical index out of range");
  }
  const int oldest = size_ < capacity_ ? 0 : cursor_;
  return (oldest + logical) % capacity_;
}

std::span<const double> MemoryBank::feature_at(int idx) const {
  return {features_.data() + static_cast<std::size_t>(physical_index(idx)) * d_,
          static_cast<std::size_t>(d_)};
}

std::span<const double> MemoryBank::probs_at(int idx) const {
  return {probs_.data() + static_cast<std::size_t>(physical_index(idx)) * c_,
          static_cast<std::size_t>(c_)};
}

std::uint64_t MemoryBank::insertion_index_at(int idx) const {
  physical_index(idx);  // bounds check
  return pushed_ - size_ + idx;
}

MemoryBank::Vote MemoryBank::soft_vote(std::span<const double> query,
                                       int k) const {
  if (size_ == 0) {
    throw std::logic_error("bank: soft_vote on an empty bank");
  }
  if (k < 1) throw std::invalid_argument("bank: k must be >= 1");
  if (static_cast<int>(query.size()) != d_) {
    throw std::invalid_argument("bank: query dim mismatch");
  }

  double qn = 0.0;
  for (const double v : query) qn += v * v;
  qn = std::sqrt(qn);
  const double inv = 1.0 / std::max(qn, ad::kCosineEps);

  std::vector<double> sim(size_);
  for (int i = 0; i < size_; ++i) {
    const auto f = feature_at(i);
    double dot = 0.0;
    for (int j = 0; j < d_; ++j) dot += f[j] * query[j];
    sim[i] = dot * inv;
  }

  std::vector<int> order(size_);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return sim[a] > sim[b]; });

  const int take = std::min<int>(k, size_);
  Vote vote;
  vote.probs.assign(c_, 0.0);
  for (int t = 0; t < take; ++t) {
    const auto p = probs_at(order[t]);
    for (int j = 0; j < c_; ++j) vote.probs[j] += p[j];
  }
  for (double& v : vote.probs) v /= take;

  vote.label = 0;
  for (int j = 1; j < c_; ++j) {
    if (vote.probs[j] > vote.probs[vote.label]) vote.label = j;
  }
  return vote;
}

void MemoryBank::dump_csv(std::ostream& os) const {
  os << "insertion_index";
  for (int j = 0; j < d_; ++j) os << ",f" << j;
  for (int j = 0; j < c_; ++j) os << ",p" << j;
  os << "\n";
  for (int i = 0; i < size_; ++i) {
    os << insertion_index_at(i);
    const auto f = feature_at(i);
    for (int j = 0; j < d_; ++j) os << "," << f[j];
    const auto p = probs_at(i);
    for (int j = 0; j < c_; ++j) os << "," << p[j];
    os << "\n";
  }
}

MemoryBank bank_init(int capacity, int feature_dim, int num_classes,
                     const std::vector<std::vector<double>>& features,
                     const std::vector<std::vector<double>>& probs) {
  if (features.size() != probs.size()) {
    throw std::invalid_argument("bank_init: feature/prob count mismatch");
  }
  MemoryBank bank(capacity, feature_dim, num_classes);
  for (std::size_t i = 0; i < features.size(); ++i) {
    bank.push(features[i], probs[i]);
  }
  return bank;
}

ad::Tensor pseudo_label_loss(const ad::Tensor& student_logits_strong,
                             std::span<const int> pseudo_labels) {
  return ad::cross_entropy_logits(student_logits_strong, pseudo_labels);
}

}  // namespace ptta::pl
