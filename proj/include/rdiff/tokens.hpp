#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "rdiff/dynamics.hpp"

namespace rdiff {

/// Index into the learned bottom-level codebook.
struct ActionToken {
    int index = 0;

    friend bool operator==(const ActionToken&, const ActionToken&) = default;
};

using Segment = std::vector<dynamics::Point2>;

/// Anything that turns a token into its decoded segment: window_steps + 1
/// points in the token-local frame, the first one at the origin.
class TokenDecoder {
public:
    virtual ~TokenDecoder() = default;
    virtual int codebook_size() const = 0;
    virtual int window_steps() const = 0;
    virtual Segment decode(ActionToken token) const = 0;
};

/// Chains token-local segments: each segment starts at the previous segment's
/// end point, with its frame heading set to the previous arrival heading.
/// Returns every non-origin point, in the frame of `start`.
std::vector<dynamics::Point2> compose_segments(std::span<const Segment> segments, dynamics::Pose2 start = {});

using Digest = std::array<std::uint8_t, 32>;

/// SHA-256 of a byte string.
Digest sha256(std::span<const std::uint8_t> bytes);

}  // namespace rdiff
