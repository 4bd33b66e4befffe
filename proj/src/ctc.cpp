#include "avw2/ctc.h"

#include <algorithm>
#include <cmath>
#include <set>

namespace avw2 {

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  std::set<std::string> seen(symbols_.begin(), symbols_.end());
  if (seen.size() != symbols_.size()) {
    fail(ErrorKind::Domain, "vocab: duplicate symbols");
  }
  if (symbols_.empty()) {
    fail(ErrorKind::Domain, "vocab: empty");
  }
}

Vocab Vocab::numeric(int size) {
  std::vector<std::string> s;
  for (int i = 0; i < size; ++i) {
    s.push_back(std::to_string(i));
  }
  return Vocab(std::move(s));
}

const std::string& Vocab::symbol(int token) const {
  if (token < 0 || token >= size()) {
    fail(ErrorKind::Domain, "vocab: token " + std::to_string(token) + " out of range");
  }
  return symbols_[token];
}

void Vocab::check(const Transcript& t) const {
  for (int tok : t) {
    symbol(tok);
  }
}

std::int64_t ctcMinFrames(const Transcript& target) {
  std::int64_t n = static_cast<std::int64_t>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i) {
    n += target[i] == target[i - 1] ? 1 : 0;
  }
  return n;
}

template <typename T>
Tensor<T> ctcLoss(const Tensor<T>& logProbs, const Transcript& target) {
  if (logProbs.rank() != 2) {
    fail(ErrorKind::Shape, "ctc_loss: log-probabilities must be [frames, classes], got " +
                               ad::shapeString(logProbs.shape()));
  }
  const std::int64_t frames = logProbs.dim(0);
  const std::int64_t classes = logProbs.dim(1);
  for (int tok : target) {
    if (tok < 0 || tok + 1 >= classes) {
      fail(ErrorKind::Domain, "ctc_loss: token " + std::to_string(tok) + " outside " +
                                  std::to_string(classes - 1) + "-token vocabulary");
    }
  }
  const auto& lp = logProbs.data();
  for (std::int64_t t = 0; t < frames; ++t) {
    double s = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      s += std::exp(static_cast<double>(lp[t * classes + c]));
    }
    if (std::abs(s - 1.0) > 1e-5) {
      fail(ErrorKind::Domain, "ctc_loss: row " + std::to_string(t) +
                                  " is not a normalized distribution");
    }
  }
  const std::int64_t need = ctcMinFrames(target);
  if (frames < need) {
    fail(ErrorKind::Infeasible, "ctc_loss: target needs at least " + std::to_string(need) +
                                    " frames, input has " + std::to_string(frames));
  }

  // Extended label sequence: blank, y1, blank, y2, ..., blank.
  const std::int64_t states = 2 * static_cast<std::int64_t>(target.size()) + 1;
  std::vector<std::int64_t> label(states, Vocab::kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) {
    label[2 * i + 1] = target[i] + 1;
  }
  std::vector<std::int64_t> prev1(states, -1), prev2(states, -1);
  for (std::int64_t s = 1; s < states; ++s) {
    prev1[s] = s - 1;
    if (s >= 2 && label[s] != Vocab::kBlank && label[s] != label[s - 2]) {
      prev2[s] = s - 2;
    }
  }
  // Finite stand-in for log(0); logAddExp gives it zero weight next to any
  // reachable state.
  const T logZero = static_cast<T>(-1e30);

  std::vector<std::int64_t> emit(states);
  auto emissions = [&](std::int64_t t) {
    for (std::int64_t s = 0; s < states; ++s) {
      emit[s] = t * classes + label[s];
    }
    return ad::take(logProbs, emit, logZero);
  };

  std::vector<std::int64_t> init(states, -1);
  init[0] = Vocab::kBlank;
  if (states > 1) {
    init[1] = label[1];
  }
  Tensor<T> alpha = ad::take(logProbs, init, logZero);
  for (std::int64_t t = 1; t < frames; ++t) {
    const auto stay = alpha;
    const auto step = ad::take(alpha, prev1, logZero);
    auto merged = ad::logAddExp(stay, step);
    if (std::any_of(prev2.begin(), prev2.end(), [](std::int64_t i) { return i >= 0; })) {
      merged = ad::logAddExp(merged, ad::take(alpha, prev2, logZero));
    }
    alpha = ad::add(merged, emissions(t));
  }
  Tensor<T> last = ad::take(alpha, {states - 1}, logZero);
  if (states > 1) {
    last = ad::logAddExp(last, ad::take(alpha, {states - 2}, logZero));
  }
  const auto loss = ad::neg(ad::sum(last));
  if (loss.item() > static_cast<T>(1e20)) {
    fail(ErrorKind::Numeric, "ctc_loss: no alignment has non-zero probability");
  }
  return loss;
}

template <typename T>
Transcript greedyDecode(const Tensor<T>& logProbs) {
  if (logProbs.rank() != 2) {
    fail(ErrorKind::Shape, "greedy_decode: expected [frames, classes], got " +
                               ad::shapeString(logProbs.shape()));
  }
  const std::int64_t frames = logProbs.dim(0);
  const std::int64_t classes = logProbs.dim(1);
  const auto& v = logProbs.data();
  Transcript out;
  std::int64_t prev = -1;
  for (std::int64_t t = 0; t < frames; ++t) {
    const auto row = v.begin() + t * classes;
    const std::int64_t best = std::max_element(row, row + classes) - row;
    if (best != prev && best != Vocab::kBlank) {
      out.push_back(static_cast<int>(best - 1));
    }
    prev = best;
  }
  return out;
}

std::int64_t editDistance(const Transcript& a, const Transcript& b) {
  std::vector<std::int64_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) {
    row[j] = static_cast<std::int64_t>(j);
  }
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::int64_t diag = row[0];
    row[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::int64_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double cer(const Transcript& hyp, const Transcript& ref) {
  if (ref.empty()) {
    fail(ErrorKind::Domain, "cer: empty reference");
  }
  return static_cast<double>(editDistance(hyp, ref)) / static_cast<double>(ref.size());
}

template Tensor<float> ctcLoss(const Tensor<float>&, const Transcript&);
template Tensor<double> ctcLoss(const Tensor<double>&, const Transcript&);
template Transcript greedyDecode(const Tensor<float>&);
template Transcript greedyDecode(const Tensor<double>&);

} // namespace avw2
