#include "rdiff/tokens.hpp"

#include <openssl/evp.h>

namespace rdiff {

std::vector<dynamics::Point2> compose_segments(std::span<const Segment> segments, dynamics::Pose2 start) {
    std::vector<dynamics::Point2> out;
    dynamics::Pose2 frame = start;
    for (const Segment& seg : segments) {
        for (std::size_t k = 1; k < seg.size(); ++k) {
            out.push_back(dynamics::to_global(frame, seg[k]));
        }
        if (!seg.empty()) {
            const dynamics::Point2 end = dynamics::to_global(frame, seg.back());
            frame.theta = wrap_angle(frame.theta + dynamics::arrival_heading(seg, 0.0));
            frame.x = end.x;
            frame.y = end.y;
        }
    }
    return out;
}

Digest sha256(std::span<const std::uint8_t> bytes) {
    Digest d{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), d.data(), &len, EVP_sha256(), nullptr);
    return d;
}

}  // namespace rdiff
