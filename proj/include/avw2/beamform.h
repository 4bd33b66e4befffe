#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "avw2/data_synth.h"

namespace avw2 {

// Integer delay-and-sum front-end.
struct BeamformPlan {
  std::vector<int> delays;     // samples; channel i is advanced by delays[i]
  std::vector<double> weights; // non-negative, sum to 1

  int channels() const {
    return static_cast<int>(delays.size());
  }
  void validate(int maxLag = kMaxDelay) const;
  static BeamformPlan uniform(std::vector<int> delays);
};

enum class BeamWeighting { Uniform, InverseEnergy };

// Lag in [-maxLag, maxLag] maximizing the normalized cross-correlation
// sum_n ref[n] * ch[n + lag] over the overlap. A channel that is `ref`
// delayed by d samples yields d. Ties go to the smaller |lag|.
int estimateTdoa(std::span<const float> reference, std::span<const float> channel, int maxLag);

// out[n] = sum_i w_i * x_i[n + d_i], zero outside each channel.
std::vector<float> delayAndSum(const std::vector<std::vector<float>>& channels,
                               const BeamformPlan& plan);

// Delays estimated against `reference`; weights uniform or proportional to
// inverse channel energy.
BeamformPlan planBeamform(const std::vector<std::vector<float>>& channels, int maxLag,
                          BeamWeighting weighting = BeamWeighting::Uniform, int reference = 0);

// Single-channel clip carrying the beamformed waveform and the same video and
// transcript; meta.delays records the applied plan.
MultichannelClip beamformClip(const MultichannelClip& clip, const BeamformPlan& plan);

} // namespace avw2
