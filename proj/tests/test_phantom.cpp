#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "ssrb/phantom.hpp"

using namespace ssrb;

namespace {
std::filesystem::path tmp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / "ssrb_test_phantom" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("phantom generation is deterministic") {
    SliceImage a = generate_phantom(7, 128);
    SliceImage b = generate_phantom(7, 128);
    REQUIRE(a.hu.same_shape(b.hu));
    for (size_t i = 0; i < a.hu.v.size(); i++) REQUIRE(a.hu.v[i] == b.hu.v[i]);
    SliceImage c = generate_phantom(8, 128);
    bool differs = false;
    for (size_t i = 0; i < a.hu.v.size(); i++) differs |= (a.hu.v[i] != c.hu.v[i]);
    CHECK(differs);
}

TEST_CASE("phantom anatomy is plausible") {
    for (uint64_t seed = 1; seed <= 40; seed++) {
        SliceImage s = generate_phantom(seed, 128);
        REQUIRE(s.meta.has_value());
        const auto& m = *s.meta;
        CHECK(m.organs.size() >= 2);
        CHECK(m.organs.size() <= 6);
        std::set<std::string> names;
        for (const auto& o : m.organs) {
            CHECK(organ_vocab_index(o.name) >= 0);
            names.insert(o.name);
        }
        CHECK(names.size() == m.organs.size());  // no duplicate organs
        // HU range sanity: air floor, bone ceiling
        CHECK(s.hu.min() >= -1000.0f);
        CHECK(s.hu.max() <= 500.0f);
        // border pixels are air
        CHECK(s.hu.at(0, 0) == -1000.0f);
        CHECK(s.hu.at(127, 127) == -1000.0f);
    }
}

TEST_CASE("phantom organ count distribution covers the full range") {
    std::set<size_t> counts;
    for (uint64_t seed = 0; seed < 200; seed++)
        counts.insert(generate_phantom(seed, 64).meta->organs.size());
    for (size_t k = 2; k <= 6; k++) CHECK(counts.count(k) == 1);
}

TEST_CASE("phantom rejects odd sizes") {
    CHECK_THROWS_AS(generate_phantom(1, 100), ConfigError);
    CHECK_THROWS_AS(generate_phantom(1, 0), ConfigError);
}

TEST_CASE("clip and normalize contracts") {
    SliceImage s = generate_phantom(3, 128);
    SliceImage c = clip_hu(s);
    CHECK(c.hu.min() >= -135.0f);
    CHECK(c.hu.max() <= 215.0f);
    CHECK(c.meta.has_value());

    NormalizedImage n = normalize(c);
    CHECK(n.px.min() >= 0.0f);
    CHECK(n.px.max() <= 1.0f);
    // linearity: a pixel at the window floor maps to 0, ceiling to 1
    Image probe(8, 8, -135.0f);
    probe.at(0, 0) = 215.0f;
    probe.at(0, 1) = 40.0f;
    SliceImage ps{probe, std::nullopt};
    NormalizedImage pn = normalize(ps);
    CHECK(pn.px.at(0, 0) == Catch::Approx(1.0f));
    CHECK(pn.px.at(1, 1) == Catch::Approx(0.0f));
    CHECK(pn.px.at(0, 1) == Catch::Approx((40.0f + 135.0f) / 350.0f));

    CHECK_THROWS_AS(normalize(s), PreconditionError);      // unclipped input
    CHECK_THROWS_AS(clip_hu(s, 10.0f, 10.0f), PreconditionError);
}

TEST_CASE("dataset build and reload") {
    auto dir = tmp_dir("dataset");
    DatasetConfig cfg;
    cfg.train_count = 6;
    cfg.test_count  = 3;
    cfg.size        = 64;
    cfg.seed        = 11;
    cfg.out_dir     = dir;
    DatasetPair pair = build_dataset(cfg);

    CHECK(pair.train.items.size() == 6);
    CHECK(pair.test.items.size() == 3);

    // seed ranges are disjoint
    std::set<uint64_t> seeds;
    for (const auto& it : pair.train.items) seeds.insert(it.seed);
    for (const auto& it : pair.test.items) seeds.insert(it.seed);
    CHECK(seeds.size() == 9);

    DatasetManifest train = load_manifest(dir / "train.manifest.json");
    CHECK(train.split == "train");
    CHECK(train.size == 64);
    CHECK(train.items.size() == 6);
    CHECK(train.window.hu_lo == -135.0f);
    CHECK(train.window.hu_hi == 215.0f);

    // stored image equals regeneration from the item seed, bit for bit
    for (size_t i = 0; i < train.items.size(); i++) {
        NormalizedImage stored = load_dataset_item(train, i);
        NormalizedImage regen  = regenerate_item(train, i);
        REQUIRE(stored.px.same_shape(regen.px));
        for (size_t j = 0; j < stored.px.v.size(); j++)
            REQUIRE(stored.px.v[j] == regen.px.v[j]);
        REQUIRE(stored.meta.has_value());
        CHECK(stored.meta->organs.size() == regen.meta->organs.size());
    }
}

TEST_CASE("dataset rebuild is byte-identical") {
    auto dir1 = tmp_dir("rebuild1");
    auto dir2 = tmp_dir("rebuild2");
    DatasetConfig cfg;
    cfg.train_count = 3;
    cfg.test_count  = 2;
    cfg.size        = 64;
    cfg.seed        = 5;
    cfg.out_dir     = dir1;
    build_dataset(cfg);
    cfg.out_dir = dir2;
    build_dataset(cfg);
    for (const char* rel : {"train.manifest.json", "test.manifest.json", "train/img_0000.ssrb",
                            "test/img_0001.meta.json"}) {
        CHECK(read_text_file(dir1 / rel) == read_text_file(dir2 / rel));
    }
}

TEST_CASE("raw slice loader") {
    auto dir = tmp_dir("raw");
    std::vector<uint16_t> raw = {0, 1000, 2000, 3000, 100, 200};
    auto path = dir / "slice.raw";
    {
        std::ofstream f(path, std::ios::binary);
        f.write(reinterpret_cast<const char*>(raw.data()),
                static_cast<std::streamsize>(raw.size() * 2));
    }
    SliceImage s = load_slice_raw(path, 3, 2, 1.0f, -1024.0f);
    CHECK(s.hu.h == 2);
    CHECK(s.hu.w == 3);
    CHECK(s.hu.at(0, 0) == -1024.0f);
    CHECK(s.hu.at(0, 1) == -24.0f);
    CHECK(s.hu.at(1, 2) == 200.0f - 1024.0f);
    CHECK_THROWS_AS(load_slice_raw(path, 4, 2, 1.0f, 0.0f), FormatError);
    CHECK_THROWS_AS(load_slice_raw(dir / "missing.raw", 3, 2, 1.0f, 0.0f), IoError);
}

TEST_CASE("dataset config validation") {
    DatasetConfig cfg;
    cfg.size    = 100;
    cfg.out_dir = tmp_dir("badcfg");
    CHECK_THROWS_AS(build_dataset(cfg), ConfigError);
    cfg.size        = 64;
    cfg.train_count = 0;
    CHECK_THROWS_AS(build_dataset(cfg), ConfigError);
}
