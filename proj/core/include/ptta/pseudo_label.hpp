#pragma once

#include "ptta/nn.hpp"
#include "ptta/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace ptta::pl {

// theta' <- m * theta' + (1 - m) * theta, elementwise over aligned lists.
// The teacher list is mutated in place and must never carry gradients.
void ema_update(const nn::ParamList& teacher, const nn::ParamList& student,
                double m_ema);

// FIFO ring buffer of (unit-norm feature, probability vector) pairs used
// for neighborhood-based pseudo-label refinement.
class MemoryBank {
 public:
  MemoryBank(int capacity, int feature_dim, int num_classes);

  int capacity() const { return capacity_; }
  int size() const { return size_; }
  int feature_dim() const { return d_; }
  int num_classes() const { return c_; }
  std::uint64_t total_pushed() const { return pushed_; }

  // Stores an L2-normalized copy of `feature` and a copy of `probs`,
  // evicting the oldest entry once full.
  void push(std::span<const double> feature, std::span<const double> probs);

  struct Vote {
    int label = -1;
    std::vector<double> probs;
  };

  // Ranks stored entries by cosine similarity to `query` and averages the
  // probability vectors of the top-min(k, size) neighbors. Ties in
  // similarity prefer older entries; argmax ties prefer the lowest class.
  Vote soft_vote(std::span<const double> query, int k) const;

  // Oldest-first access for tests and dumps. idx in [0, size).
  std::span<const double> feature_at(int idx) const;
  std::span<const double> probs_at(int idx) const;
  // Monotone insertion number of the entry at logical position idx.
  std::uint64_t insertion_index_at(int idx) const;

  // Columnar dump, oldest first: insertion_index, f0..f{d-1}, p0..p{C-1}.
  void dump_csv(std::ostream& os) const;

 private:
  int physical_index(int logical) const;

  int capacity_;
  int d_;
  int c_;
  int size_ = 0;
  int cursor_ = 0;  // next slot to overwrite
  std::uint64_t pushed_ = 0;
  std::vector<double> features_;
  std::vector<double> probs_;
};

// Process-wide count of MemoryBank::push calls, for protocol tests that
// assert a code path never touches a bank.
std::uint64_t bank_push_count();

// Builds a bank of `capacity` slots and pushes every warmup pair through
// the FIFO (a warmup larger than the capacity keeps its most recent part).
MemoryBank bank_init(int capacity, int feature_dim, int num_classes,
                     const std::vector<std::vector<double>>& features,
                     const std::vector<std::vector<double>>& probs);

// Mean cross-entropy between hard pseudo-labels and the softmax of the
// strong-view logits.
ad::Tensor pseudo_label_loss(const ad::Tensor& student_logits_strong,
                             std::span<const int> pseudo_labels);

}  // namespace ptta::pl
