#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "avw2/nn.h"

namespace avw2 {

// Token indices in [0, vocabulary size); the blank is not a token.
using Transcript = std::vector<int>;

// Output classes: index 0 is the blank, token i maps to class i + 1.
class Vocab {
 public:
  static constexpr int kBlank = 0;

  explicit Vocab(std::vector<std::string> symbols);
  // Symbols "0".."n-1".
  static Vocab numeric(int size);

  int size() const {
    return static_cast<int>(symbols_.size());
  }
  int numClasses() const {
    return size() + 1;
  }
  const std::string& symbol(int token) const;
  void check(const Transcript& t) const;

 private:
  std::vector<std::string> symbols_;
};

// Minimum frames needed to emit `target`: its length plus one blank between
// each pair of equal neighbours.
std::int64_t ctcMinFrames(const Transcript& target);

// -log of the summed probability of every alignment of `target`, by the
// log-space forward recursion. logProbs: [frames, tokens + 1], rows must be
// normalized. Infeasible lengths raise ErrorKind::Infeasible.
template <typename T>
Tensor<T> ctcLoss(const Tensor<T>& logProbs, const Transcript& target);

// Per-frame argmax, merge repeats, drop blanks.
template <typename T>
Transcript greedyDecode(const Tensor<T>& logProbs);

std::int64_t editDistance(const Transcript& a, const Transcript& b);

// editDistance(hyp, ref) / |ref|; domain error for an empty reference.
double cer(const Transcript& hyp, const Transcript& ref);

} // namespace avw2
