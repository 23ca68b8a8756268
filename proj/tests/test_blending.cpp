#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace ditctrl;
using ditctrl::testing::TempDir;

namespace {

LatentVideo filled(std::size_t frames, double value) { return LatentVideo(frames, 1, 1, 1, value); }

} // namespace

TEST(Layout, PipelineFigureExample) {
    const SegmentLayout l = plan_segments(2, 3, 1);
    EXPECT_EQ(l.total_frames(), 5u);
    EXPECT_EQ(l.start(0), 0u);
    EXPECT_EQ(l.start(1), 2u);
    EXPECT_EQ(l.covering(2), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(l.covering(4), (std::vector<std::size_t>{1}));
}

TEST(Layout, DefaultHyperparameters) {
    const SegmentLayout l = plan_segments(2, 13, 6);
    EXPECT_EQ(l.total_frames(), 20u);
    EXPECT_EQ(l.start(1), 7u);
    EXPECT_EQ(l.start(1) + 13, 20u);
}

TEST(Layout, SingleSegmentAndLongChains) {
    EXPECT_EQ(plan_segments(1, 9, 4).total_frames(), 9u);
    EXPECT_EQ(plan_segments(12, 13, 6).total_frames(), 90u);
    EXPECT_THROW(plan_segments(2, 5, 5), Error);
    EXPECT_THROW(plan_segments(0, 5, 1), Error);
}

TEST(PositionWeight, PublishedValuesForThirteenFrames) {
    EXPECT_EQ(position_weight(6, 13), 1.0);
    EXPECT_EQ(position_weight(0, 13), 1.0 / 13);
    for (std::size_t t = 0; t < 13; ++t) {
        EXPECT_EQ(position_weight(t, 13), position_weight(12 - t, 13)) << t;
        const double x = 2.0 * (static_cast<double>(t) + 0.5) / 13.0;
        EXPECT_NEAR(position_weight(t, 13), std::min(x, 2.0 - x), 1e-15);
        EXPECT_GT(position_weight(t, 13), 0.0);
    }
    EXPECT_THROW(position_weight(13, 13), Error);
}

TEST(Blend, HandInstanceOnFigureLayout) {
    const SegmentLayout l = plan_segments(2, 3, 1);
    LatentVideo a = filled(3, 1.0), b = filled(3, 2.0);
    a.at(2, 0, 0, 0) = 3.0;
    b.at(0, 0, 0, 0) = 9.0;
    // w_A = w(2) = min(5/3, 1/3) = 1/3, w_B = w(0) = min(1/3, 5/3) = 1/3
    const double wa = 1.0 / 3, wb = 1.0 / 3;
    const LatentVideo g = blend({a, b}, l);
    ASSERT_EQ(g.frames(), 5u);
    EXPECT_NEAR(g.at(2, 0, 0, 0), (wa * 3.0 + wb * 9.0) / (wa + wb), 1e-12);
    EXPECT_EQ(g.at(2, 0, 0, 0), 6.0);
    EXPECT_EQ(g.at(0, 0, 0, 0), 1.0);
    EXPECT_EQ(g.at(4, 0, 0, 0), 2.0);
}

TEST(Blend, ZeroOverlapIsConcatenation) {
    const LatentVideo a = gaussian_latent(4, 2, 3, 2, 1), b = gaussian_latent(4, 2, 3, 2, 2);
    const LatentVideo g = blend({a, b}, plan_segments(2, 4, 0));
    EXPECT_TRUE(bitwise_equal(g.tensor(), concat_frames({a, b}).tensor()));
}

TEST(Blend, IdenticalOverlapContentIsReproducedExactly) {
    const SegmentLayout l = plan_segments(3, 13, 6);
    const LatentVideo global = gaussian_latent(l.total_frames(), 2, 2, 3, 5);
    const LatentVideo g = blend(reslice(global, l), l);
    EXPECT_TRUE(bitwise_equal(g.tensor(), global.tensor()));
}

TEST(Blend, OutputIsConvexCombinationOfContributors) {
    const SegmentLayout l = plan_segments(3, 7, 4);
    std::vector<LatentVideo> segs;
    for (std::uint64_t s = 0; s < 3; ++s) segs.push_back(gaussian_latent(7, 2, 2, 2, 10 + s));
    const LatentVideo g = blend(segs, l);
    for (std::size_t f = 0; f < l.total_frames(); ++f) {
        const auto cover = l.covering(f);
        for (std::size_t k = 0; k < g.frame_size(); ++k) {
            double lo = 1e300, hi = -1e300, ref = 0, denom = 0;
            for (std::size_t i : cover) {
                const double z = segs[i].frame(f - l.start(i))[k], w = position_weight(f - l.start(i), 7);
                lo = std::min(lo, z);
                hi = std::max(hi, z);
                ref += w * z;
                denom += w;
            }
            const double v = g.frame(f)[k];
            EXPECT_GE(v, lo - 1e-12);
            EXPECT_LE(v, hi + 1e-12);
            EXPECT_NEAR(v, ref / denom, 1e-12);
        }
    }
}

TEST(Blend, RejectsMismatchedSegments) {
    const SegmentLayout l = plan_segments(2, 3, 1);
    EXPECT_THROW(blend({filled(3, 0)}, l), Error);
    EXPECT_THROW(blend({filled(3, 0), filled(4, 0)}, l), Error);
    EXPECT_THROW(reslice(filled(4, 0), l), Error);
}

TEST(Blend, WeightsCsvListsEveryPosition) {
    TempDir dir;
    write_weights_csv(dir / weights_file_name(13), 13);
    std::ifstream in(dir / "weights_T13.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "t,w");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        EXPECT_EQ(std::stod(line.substr(comma + 1)), position_weight(rows, 13));
        ++rows;
    }
    EXPECT_EQ(rows, 13u);
}
