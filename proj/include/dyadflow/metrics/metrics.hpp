#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyadflow/diff/array.hpp"

namespace dyadflow::metrics {

using diff::Array;
using Sequence = Array<double>;  // frames x channels
using Channels = std::vector<std::size_t>;

enum class SegmentKind { speaking, listening };

struct Segment {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  SegmentKind kind = SegmentKind::speaking;
  bool operator==(const Segment&) const = default;
};

using SegmentSet = std::vector<Segment>;

// speaking <=> actor VAD; listening <=> !actor && partner; frames with
// neither flag are left out. Adjacent frames of one kind merge into runs.
SegmentSet vad_segments(const std::vector<std::uint8_t>& actor_vad, const std::vector<std::uint8_t>& partner_vad);
SegmentSet filter(const SegmentSet& segments, SegmentKind kind);
SegmentSet whole(std::size_t frames, SegmentKind kind = SegmentKind::speaking);
std::string kind_name(SegmentKind kind);

// Population std of frame-to-frame velocities, pooled over every segment
// frame pair and channel of every sequence. Velocities never bridge segments.
double velocity_std(const std::vector<Sequence>& seqs, const Channels& channels,
                    const std::vector<SegmentSet>& segments);

// |velocity_std(pred) - velocity_std(gt)|: FDD on expr, PDD on neck+rot, JDD on jaw.
double dynamic_deviation(const std::vector<Sequence>& pred, const std::vector<Sequence>& gt, const Channels& channels,
                         const std::vector<SegmentSet>& segments);
double dynamic_deviation(const Sequence& pred, const Sequence& gt, const Channels& channels,
                         const SegmentSet& segments);

struct GaussianFit {
  std::vector<double> mean;
  Array<double> cov;  // k x k, unbiased
  std::size_t dim() const { return mean.size(); }
};

// rows: one observation per row. Needs at least two observations.
GaussianFit fit_gaussian(const Array<double>& rows);
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

// Segment frames of `channels` stacked as observations.
Array<double> gather_frames(const std::vector<Sequence>& seqs, const Channels& channels,
                            const std::vector<SegmentSet>& segments);

double fd(const std::vector<Sequence>& pred, const std::vector<Sequence>& gt, const Channels& channels,
          const std::vector<SegmentSet>& segments);
// FD over joint [actor ; partner] frame features.
double paired_fd(const std::vector<Sequence>& pred_actor, const std::vector<Sequence>& partner,
                 const std::vector<Sequence>& gt_actor, const Channels& channels,
                 const std::vector<SegmentSet>& segments);

double mse(const std::vector<Sequence>& pred, const std::vector<Sequence>& gt, const Channels& channels,
           const std::vector<SegmentSet>& segments);

// Mean over frames of the mean pairwise L2 distance between S generations.
double sid_diversity(const std::vector<Sequence>& samples, const Channels& channels);

// Per-channel |PCC(pred, partner) - PCC(gt, partner)| over segment frames,
// averaged over channels. A constant series has PCC 0.
double rpcc(const Sequence& pred, const Sequence& gt, const Sequence& partner, const Channels& channels,
            const SegmentSet& segments);

// Mean over speaking frames of the L2 error on the jaw channels.
double lve_analogue(const Sequence& pred, const Sequence& gt, const Channels& jaw, const SegmentSet& speaking);
// Mean over all frames of the L2 error across every channel.
double mhd_analogue(const Sequence& pred, const Sequence& gt);

}  // namespace dyadflow::metrics
