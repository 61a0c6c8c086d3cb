#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "smunet/phantom.hpp"
#include "smunet/raw_io.hpp"

using namespace smunet;
namespace fs = std::filesystem;

namespace {

PhantomConfig small_config() {
    PhantomConfig c;
    c.spatial_size = {16, 16, 16};
    c.num_volumes = 2;
    c.seed = 7;
    c.style_gap = 0.5;
    c.tumor_probability = 1.0;
    return c;
}

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("smunet_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST(Phantom, DeterministicAcrossRuns) {
    auto a = generate_phantom(small_config());
    auto b = generate_phantom(small_config());
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_EQ(0, std::memcmp(a[i].modalities.data(), b[i].modalities.data(),
                                 sizeof(float) * a[i].modalities.size()));
        ASSERT_EQ(0, std::memcmp(a[i].labels.data(), b[i].labels.data(),
                                 static_cast<std::size_t>(a[i].labels.size())));
    }
    auto c = [&] {
        auto cfg = small_config();
        cfg.seed = 8;
        return generate_phantom(cfg);
    }();
    EXPECT_NE(0, std::memcmp(a[0].modalities.data(), c[0].modalities.data(),
                             sizeof(float) * a[0].modalities.size()));
}

TEST(Phantom, ZeroStyleGapLeavesPureMonotoneChannels) {
    auto cfg = small_config();
    cfg.style_gap = 0.0;
    cfg.num_volumes = 1;
    auto v = generate_phantom(cfg)[0];
    const std::int64_t nvox = v.spatial().voxels();
    // With no texture noise every channel is a fixed monotone transform of the
    // same tissue field: within-brain voxel pairs must be rank-consistent
    // (FLAIR/T1c/T2 increasing, T1 decreasing).
    const float* fl = v.modalities.data();
    const float* t1 = v.modalities.data() + nvox;
    const float* t1c = v.modalities.data() + 2 * nvox;
    const float* t2 = v.modalities.data() + 3 * nvox;
    std::vector<std::int64_t> brain;
    for (std::int64_t i = 0; i < nvox; ++i)
        if (fl[i] != 0.0f) brain.push_back(i);
    ASSERT_GT(brain.size(), 100u);
    for (std::size_t a = 0; a < brain.size(); a += 37)
        for (std::size_t b = a + 1; b < brain.size(); b += 53) {
            const std::int64_t i = brain[a], j = brain[b];
            const double df = fl[i] - fl[j];
            EXPECT_GE(df * (t2[i] - t2[j]), 0.0);
            EXPECT_GE(df * (t1c[i] - t1c[j]), 0.0);
            EXPECT_LE(df * (t1[i] - t1[j]), 0.0);
        }
}

TEST(Phantom, TumorAlwaysContainsAllThreeLabels) {
    auto cfg = small_config();
    cfg.num_volumes = 10;
    cfg.tumor_probability = 1.0;
    auto vols = generate_phantom(cfg);
    ASSERT_EQ(vols.size(), 10u);
    for (const auto& v : vols) {
        std::set<int> seen;
        for (std::int64_t i = 0; i < v.labels.size(); ++i) seen.insert(v.labels[i]);
        EXPECT_TRUE(seen.count(1)) << "missing core label";
        EXPECT_TRUE(seen.count(2)) << "missing edema label";
        EXPECT_TRUE(seen.count(4)) << "missing enhancing label";
    }
}

TEST(Phantom, TumorProbabilityZeroMeansNoTumor) {
    auto cfg = small_config();
    cfg.tumor_probability = 0.0;
    for (const auto& v : generate_phantom(cfg))
        for (std::int64_t i = 0; i < v.labels.size(); ++i) EXPECT_EQ(v.labels[i], 0);
}

TEST(Phantom, RejectsBadSpatialSize) {
    auto cfg = small_config();
    cfg.spatial_size = {30, 32, 32};
    EXPECT_THROW(generate_phantom(cfg), std::invalid_argument);
}

TEST(Regions, LabelMembership) {
    Tensor<std::uint8_t> labels({1, 1, 4});
    labels[0] = 0;
    labels[1] = 1;
    labels[2] = 2;
    labels[3] = 4;
    auto r = derive_regions(labels);
    // label 4: member of wt, ct and et
    EXPECT_EQ(r.wt[3], 1);
    EXPECT_EQ(r.ct[3], 1);
    EXPECT_EQ(r.et[3], 1);
    // label 0: member of none
    EXPECT_EQ(r.wt[0] + r.ct[0] + r.et[0], 0);
    // label 2 (edema): whole tumor only
    EXPECT_EQ(r.wt[2], 1);
    EXPECT_EQ(r.ct[2], 0);
    EXPECT_EQ(r.et[2], 0);
    // label 1: core but not enhancing
    EXPECT_EQ(r.wt[1], 1);
    EXPECT_EQ(r.ct[1], 1);
    EXPECT_EQ(r.et[1], 0);
}

TEST(Regions, RejectsUnknownLabelNamingValue) {
    Tensor<std::uint8_t> labels({1, 1, 2});
    labels[1] = 3;
    try {
        derive_regions(labels);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    }
}

TEST(Regions, NestingHoldsOnRandomGrids) {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<std::uint8_t> labels({4, 4, 4});
        for (std::int64_t i = 0; i < labels.size(); ++i)
            labels[i] = static_cast<std::uint8_t>(kLabelValues[rng.below(4)]);
        auto r = derive_regions(labels);
        for (std::int64_t i = 0; i < labels.size(); ++i) {
            EXPECT_LE(r.et[i], r.ct[i]);
            EXPECT_LE(r.ct[i], r.wt[i]);
        }
    }
}

TEST(Mask, EnumerateSubsetsMatchesTableOrder) {
    auto subsets = enumerate_subsets();
    ASSERT_EQ(subsets.size(), 15u);
    const std::vector<std::string> expected = {
        "0001", "0010", "0100", "1000", "0011", "0110", "1100", "0101",
        "1001", "1010", "1110", "1101", "1011", "0111", "1111"};
    std::set<std::string> unique;
    for (std::size_t i = 0; i < subsets.size(); ++i) {
        EXPECT_EQ(subsets[i].bits(), expected[i]) << "row " << i;
        EXPECT_GE(subsets[i].count(), 1);
        unique.insert(subsets[i].bits());
    }
    EXPECT_EQ(unique.size(), 15u);
    EXPECT_EQ(subsets.back().bits(), "1111");
    // Calling twice yields the identical sequence.
    auto again = enumerate_subsets();
    for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(subsets[i].bits(), again[i].bits());
}

TEST(Mask, AllAbsentRejected) {
    EXPECT_THROW(ModalityMask::of(false, false, false, false), std::invalid_argument);
    EXPECT_THROW(ModalityMask::parse("0000"), std::invalid_argument);
    EXPECT_THROW(ModalityMask::parse("10"), std::invalid_argument);
    EXPECT_THROW(ModalityMask::parse("10x0"), std::invalid_argument);
}

TEST(Mask, ApplyMaskZeroFillsAbsentChannels) {
    auto cfg = small_config();
    cfg.num_volumes = 1;
    auto v = generate_phantom(cfg)[0];
    const std::int64_t nvox = v.spatial().voxels();

    auto full = apply_modality_mask(v, ModalityMask::all());
    EXPECT_EQ(0, std::memcmp(full.modalities.data(), v.modalities.data(),
                             sizeof(float) * v.modalities.size()));

    auto flair_only = apply_modality_mask(v, ModalityMask::parse("1000"));
    for (std::int64_t i = 0; i < nvox; ++i)
        EXPECT_EQ(flair_only.modalities[i], v.modalities[i]);
    for (std::int64_t c = 1; c < 4; ++c)
        for (std::int64_t i = 0; i < nvox; ++i)
            EXPECT_EQ(flair_only.modalities[c * nvox + i], 0.0f);

    // Absolute mass of the masked volume equals the mass of present channels.
    auto mask = ModalityMask::parse("0110");
    auto masked = apply_modality_mask(v, mask);
    double masked_sum = 0, present_sum = 0;
    for (std::int64_t i = 0; i < masked.modalities.size(); ++i)
        masked_sum += std::abs(masked.modalities[i]);
    for (std::int64_t c = 0; c < 4; ++c) {
        if (!mask.has(c)) continue;
        for (std::int64_t i = 0; i < nvox; ++i)
            present_sum += std::abs(v.modalities[c * nvox + i]);
    }
    EXPECT_DOUBLE_EQ(masked_sum, present_sum);

    // Idempotence: masking twice equals masking once.
    auto twice = apply_modality_mask(masked, mask);
    EXPECT_EQ(0, std::memcmp(twice.modalities.data(), masked.modalities.data(),
                             sizeof(float) * masked.modalities.size()));
}

TEST(RawIo, EmptyDirectoryYieldsEmptySequence) {
    auto dir = temp_dir("empty");
    auto vols = ingest_raw(dir, {16, 16, 16});
    EXPECT_TRUE(vols.empty());
}

TEST(RawIo, RoundTripPreservesLabelsAndNormalizedIntensities) {
    auto cfg = small_config();
    auto vols = generate_phantom(cfg);
    auto dir = temp_dir("roundtrip");
    write_raw_dataset(dir, vols);
    auto back = ingest_raw(dir, cfg.spatial_size);
    ASSERT_EQ(back.size(), vols.size());
    for (std::size_t i = 0; i < vols.size(); ++i) {
        ASSERT_EQ(0, std::memcmp(back[i].labels.data(), vols[i].labels.data(),
                                 static_cast<std::size_t>(vols[i].labels.size())));
        // Ingest z-scores over nonzero voxels; applying the same normalization
        // to the in-memory original must reproduce the ingested intensities.
        LabeledVolume norm = vols[i];
        zscore_nonzero(norm);
        for (std::int64_t k = 0; k < norm.modalities.size(); ++k)
            ASSERT_NEAR(back[i].modalities[k], norm.modalities[k], 1e-6f);
    }
}

TEST(RawIo, UnknownLabelReportsCaseAndValue) {
    auto cfg = small_config();
    cfg.num_volumes = 1;
    auto vols = generate_phantom(cfg);
    auto dir = temp_dir("badlabel");
    write_raw_dataset(dir, vols);
    // Corrupt one label byte to 3.
    {
        std::fstream f(dir / "case_000" / "labels.u8",
                       std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(10);
        char three = 3;
        f.write(&three, 1);
    }
    try {
        ingest_raw(dir, cfg.spatial_size);
        FAIL() << "expected failure";
    } catch (const std::exception& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("case_000"), std::string::npos) << msg;
        EXPECT_NE(msg.find("3"), std::string::npos) << msg;
    }
}

TEST(RawIo, ShapeMismatchReportsCase) {
    auto cfg = small_config();
    cfg.num_volumes = 1;
    auto dir = temp_dir("badshape");
    write_raw_dataset(dir, generate_phantom(cfg));
    try {
        ingest_raw(dir, {32, 32, 32});
        FAIL() << "expected failure";
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("case_000"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos);
    }
}

TEST(RawIo, TruncatedFileReportsCase) {
    auto cfg = small_config();
    cfg.num_volumes = 1;
    auto dir = temp_dir("truncated");
    write_raw_dataset(dir, generate_phantom(cfg));
    fs::resize_file(dir / "case_000" / "modalities.f32", 128);
    try {
        ingest_raw(dir, cfg.spatial_size);
        FAIL() << "expected failure";
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("case_000"), std::string::npos);
    }
}
