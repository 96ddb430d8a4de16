#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <functional>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dverge/data_io.hpp"
#include "helpers.hpp"

using namespace dverge;
using namespace testing_helpers;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("dverge_unit_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
    return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
            static_cast<unsigned char>(v)};
}

std::vector<unsigned char> cat(std::initializer_list<std::vector<unsigned char>> parts) {
    std::vector<unsigned char> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
    SyntheticSpec s = small_synthetic(10, 3);
    Dataset a = gen_synthetic(s, "train"), b = gen_synthetic(s, "train");
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
}

TEST(Synthetic, SplitsUseDisjointStreams) {
    SyntheticSpec s = small_synthetic(10, 3);
    EXPECT_NE(gen_synthetic(s, "train").images, gen_synthetic(s, "test").images);
}

TEST(Synthetic, ZeroNoiseMakesClassesConstant) {
    SyntheticSpec s;
    s.per_class = 4;
    s.noise = 0;
    Dataset d = gen_synthetic(s, "train");
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = i + 1; j < d.size(); ++j) {
            if (d.labels[i] != d.labels[j]) continue;
            EXPECT_TRUE(std::equal(d.images.row(i).begin(), d.images.row(i).end(), d.images.row(j).begin()));
        }
    }
}

TEST(Synthetic, ClassesAreDistinctAndBalanced) {
    SyntheticSpec s;
    s.per_class = 3;
    s.noise = 0;
    Dataset d = gen_synthetic(s, "train");
    EXPECT_EQ(d.size(), 30u);
    std::vector<int> counts(10, 0);
    for (auto l : d.labels) ++counts[l];
    for (int c : counts) EXPECT_EQ(c, 3);
    std::set<std::vector<Scalar>> glyphs;
    for (std::size_t k = 0; k < 10; ++k) {
        Tensor g = render_glyph(k, 16);
        glyphs.insert(g.values());
    }
    EXPECT_EQ(glyphs.size(), 10u);
    d.validate();
}

TEST(Synthetic, RejectsBadSpecs) {
    SyntheticSpec s;
    s.classes = 1;
    EXPECT_THROW(gen_synthetic(s, "train"), std::invalid_argument);
    s = SyntheticSpec{};
    EXPECT_THROW(gen_synthetic(s, "valid"), std::invalid_argument);
    s.amplitude = 0.8;
    s.background = 0.5;
    EXPECT_THROW(gen_synthetic(s, "train"), std::invalid_argument);
}

TEST(Synthetic, FreshModelLearnsTheDefaultSet) {
    SyntheticSpec s;
    s.seed = 2;
    Dataset train = gen_synthetic(s, "train");
    s.per_class = 50;
    Dataset test = gen_synthetic(s, "test");
    ModelSpec ms;
    ms.seed = 4;
    Ensemble e = Ensemble::build(ms, 1);
    TrainPlan plan;
    plan.n = 1;
    plan.seed = 4;
    pretrain_clean(e, plan, train, 10);
    const auto pred = ensemble_predict(e, test.images).labels;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test.labels[i];
    EXPECT_GE(double(ok) / double(pred.size()), 0.9);
}

TEST(Idx, SinglePixel255ReadsAsOne) {
    fs::path dir = scratch("idx1");
    write_bytes(dir / "img", cat({be32(0x803), be32(1), be32(1), be32(1), {255}}));
    write_bytes(dir / "lbl", cat({be32(0x801), be32(1), {0}}));
    Dataset d = load_idx(dir / "img", dir / "lbl", 2);
    EXPECT_EQ(d.images.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(d.images[0], Scalar(1));
    fs::remove_all(dir);
}

TEST(Idx, MismatchedCountsNameBoth) {
    fs::path dir = scratch("idx2");
    write_bytes(dir / "img", cat({be32(0x803), be32(2), be32(1), be32(1), {1, 2}}));
    write_bytes(dir / "lbl", cat({be32(0x801), be32(3), {0, 1, 0}}));
    const std::string msg = error_of([&] { load_idx(dir / "img", dir / "lbl"); });
    EXPECT_NE(msg.find('2'), std::string::npos);
    EXPECT_NE(msg.find('3'), std::string::npos);
    EXPECT_NE(msg.find("count"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Idx, BadMagicAndTruncationRejectedWithOffset) {
    fs::path dir = scratch("idx3");
    write_bytes(dir / "img", cat({be32(0x802), be32(1), be32(1), be32(1), {0}}));
    write_bytes(dir / "lbl", cat({be32(0x801), be32(1), {0}}));
    EXPECT_NE(error_of([&] { load_idx(dir / "img", dir / "lbl"); }).find("magic"), std::string::npos);
    write_bytes(dir / "img", cat({be32(0x803), be32(2), be32(2), be32(2), {0, 1, 2}}));
    write_bytes(dir / "lbl", cat({be32(0x801), be32(2), {0, 1}}));
    const std::string msg = error_of([&] { load_idx(dir / "img", dir / "lbl"); });
    EXPECT_NE(msg.find("offset"), std::string::npos) << msg;
    fs::remove_all(dir);
}

TEST(Idx, RoundTripIsBitwise) {
    fs::path dir = scratch("idx4");
    SyntheticSpec s = small_synthetic(5, 8);
    s.channels = 3;
    Dataset d = gen_synthetic(s, "test");
    write_idx(d, dir / "img", dir / "lbl");
    Dataset back = load_idx(dir / "img", dir / "lbl", d.classes);
    EXPECT_EQ(back.images, d.images);
    EXPECT_EQ(back.labels, d.labels);
    fs::remove_all(dir);
}

TEST(Batches, SeededShuffleCoversEverySampleOnce) {
    auto a = shuffled_batches(103, 10, 5);
    EXPECT_EQ(a, shuffled_batches(103, 10, 5));
    EXPECT_NE(a, shuffled_batches(103, 10, 6));
    std::vector<int> seen(103, 0);
    for (const auto& b : a) {
        EXPECT_LE(b.size(), 10u);
        for (auto i : b) ++seen[i];
    }
    for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(Checkpoint, RoundTripIsBitwiseForEveryArchitecture) {
    for (auto arch : {Architecture::MlpSmall, Architecture::CnnSmall, Architecture::CnnResidual}) {
        fs::path dir = scratch("ckpt_" + to_string(arch));
        ModelSpec ms;
        ms.arch = arch;
        ms.seed = 21;
        Ensemble e = Ensemble::build(ms, 3);
        Tensor x = random_images(5, 3);
        std::vector<Tensor> before;
        for (auto& m : e.members()) before.push_back(m.forward(x));
        save_checkpoint(e, dir);
        EXPECT_TRUE(fs::exists(dir / "ensemble.json"));
        for (int i = 0; i < 3; ++i) {
            EXPECT_TRUE(fs::exists(dir / ("sub_" + std::to_string(i)) / "manifest.json"));
            EXPECT_TRUE(fs::exists(dir / ("sub_" + std::to_string(i)) / "weights.bin"));
        }
        Ensemble loaded = load_checkpoint(dir);
        ASSERT_EQ(loaded.size(), 3u);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(loaded[i].forward(x), before[i]);
            EXPECT_EQ(loaded[i].parameters(), e[i].parameters());
            EXPECT_EQ(loaded[i].spec(), e[i].spec());
        }
        fs::remove_all(dir);
    }
}

TEST(Checkpoint, CorruptedBlobRejected) {
    fs::path dir = scratch("ckpt_bad");
    Ensemble e = Ensemble::build(ModelSpec{}, 1);
    save_checkpoint(e, dir);
    const fs::path blob = dir / "sub_0" / "weights.bin";
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(17);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x40);
    f.seekp(17);
    f.write(&c, 1);
    f.close();
    EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("digest"), std::string::npos);
    fs::remove_all(dir);
}

TEST(Checkpoint, VersionMismatchAndMissingFilesRejected) {
    fs::path dir = scratch("ckpt_ver");
    Ensemble e = Ensemble::build(ModelSpec{}, 1);
    save_checkpoint(e, dir);
    {
        std::ofstream out(dir / "ensemble.json", std::ios::trunc);
        out << R"({"format_version": 99, "count": 1, "members": []})";
    }
    EXPECT_NE(error_of([&] { load_checkpoint(dir); }).find("version"), std::string::npos);
    fs::remove_all(dir);
    EXPECT_THROW(load_checkpoint(dir), std::runtime_error);
}

TEST(Checksum, Fnv1aKnownValues) {
    EXPECT_EQ(fnv1a64("", 0), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}
