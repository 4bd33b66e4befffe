#include "avw2/beamform.h"

#include <cmath>
#include <cstdlib>
#include <limits>

namespace avw2 {

void BeamformPlan::validate(int maxLag) const {
  if (delays.empty() || weights.size() != delays.size()) {
    fail(ErrorKind::Shape, "beamform plan: " + std::to_string(delays.size()) + " delays and " +
                               std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < delays.size(); ++i) {
    if (std::abs(delays[i]) > maxLag) {
      fail(ErrorKind::Domain, "beamform plan: delay " + std::to_string(delays[i]) +
                                  " exceeds max lag " + std::to_string(maxLag));
    }
    if (!(weights[i] >= 0.0)) {
      fail(ErrorKind::Domain, "beamform plan: negative weight");
    }
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-6) {
    fail(ErrorKind::Domain, "beamform plan: weights sum to " + std::to_string(total));
  }
}

BeamformPlan BeamformPlan::uniform(std::vector<int> delays) {
  BeamformPlan plan;
  plan.weights.assign(delays.size(), 1.0 / static_cast<double>(delays.size()));
  plan.delays = std::move(delays);
  return plan;
}

int estimateTdoa(std::span<const float> reference, std::span<const float> channel, int maxLag) {
  const auto n = static_cast<std::int64_t>(reference.size());
  if (static_cast<std::int64_t>(channel.size()) != n) {
    fail(ErrorKind::Shape, "estimate_tdoa: lengths " + std::to_string(n) + " and " +
                               std::to_string(channel.size()));
  }
  if (maxLag < 0 || 2 * static_cast<std::int64_t>(maxLag) >= n) {
    fail(ErrorKind::Domain, "estimate_tdoa: max lag " + std::to_string(maxLag) +
                                " must be below half the length " + std::to_string(n));
  }
  double er = 0.0, ec = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    er += static_cast<double>(reference[i]) * reference[i];
    ec += static_cast<double>(channel[i]) * channel[i];
  }
  if (er == 0.0 || ec == 0.0) {
    fail(ErrorKind::Domain, "estimate_tdoa: zero-energy input");
  }
  auto score = [&](int lag) {
    double xy = 0.0, xx = 0.0, yy = 0.0;
    const std::int64_t lo = std::max<std::int64_t>(0, -lag);
    const std::int64_t hi = std::min<std::int64_t>(n, n - lag);
    for (std::int64_t i = lo; i < hi; ++i) {
      const double x = reference[i], y = channel[i + lag];
      xy += x * y;
      xx += x * x;
      yy += y * y;
    }
    return xx > 0.0 && yy > 0.0 ? xy / std::sqrt(xx * yy) : 0.0;
  };
  int best = 0;
  double bestScore = score(0);
  for (int mag = 1; mag <= maxLag; ++mag) {
    for (int lag : {-mag, mag}) {
      const double s = score(lag);
      if (s > bestScore) {
        bestScore = s;
        best = lag;
      }
    }
  }
  return best;
}

std::vector<float> delayAndSum(const std::vector<std::vector<float>>& channels,
                               const BeamformPlan& plan) {
  if (channels.empty() || static_cast<int>(channels.size()) != plan.channels()) {
    fail(ErrorKind::Shape, "delay_and_sum: plan covers " + std::to_string(plan.channels()) +
                               " channels, got " + std::to_string(channels.size()));
  }
  plan.validate(std::numeric_limits<int>::max());
  const auto n = static_cast<std::int64_t>(channels.front().size());
  std::vector<double> acc(n, 0.0);
  for (std::size_t c = 0; c < channels.size(); ++c) {
    if (static_cast<std::int64_t>(channels[c].size()) != n) {
      fail(ErrorKind::Shape, "delay_and_sum: channel " + std::to_string(c) + " has length " +
                                 std::to_string(channels[c].size()) + ", expected " +
                                 std::to_string(n));
    }
    const int d = plan.delays[c];
    const double w = plan.weights[c];
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t src = i + d;
      if (src >= 0 && src < n) {
        acc[i] += w * channels[c][src];
      }
    }
  }
  return std::vector<float>(acc.begin(), acc.end());
}

BeamformPlan planBeamform(const std::vector<std::vector<float>>& channels, int maxLag,
                          BeamWeighting weighting, int reference) {
  if (channels.empty() || reference < 0 || reference >= static_cast<int>(channels.size())) {
    fail(ErrorKind::Domain, "plan_beamform: reference channel out of range");
  }
  BeamformPlan plan;
  double total = 0.0;
  for (const auto& ch : channels) {
    plan.delays.push_back(estimateTdoa(channels[reference], ch, maxLag));
    double w = 1.0;
    if (weighting == BeamWeighting::InverseEnergy) {
      double e = 0.0;
      for (float v : ch) {
        e += static_cast<double>(v) * v;
      }
      w = 1.0 / e;
    }
    plan.weights.push_back(w);
    total += w;
  }
  for (auto& w : plan.weights) {
    w /= total;
  }
  return plan;
}

MultichannelClip beamformClip(const MultichannelClip& clip, const BeamformPlan& plan) {
  MultichannelClip out;
  out.id = clip.id;
  out.channels = {delayAndSum(clip.channels, plan)};
  out.video = clip.video;
  out.videoFrames = clip.videoFrames;
  out.transcript = clip.transcript;
  out.meta = clip.meta;
  out.meta.delays = plan.delays;
  out.meta.gains = {1.0};
  out.meta.beamformed = true;
  return out;
}

} // namespace avw2
