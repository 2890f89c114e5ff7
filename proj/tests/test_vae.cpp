#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ssrb/vae.hpp"

using namespace ssrb;

namespace {

std::filesystem::path tmp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / "ssrb_test_vae" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

Tensor random_tensor(uint64_t seed, int n, int c, int h, int w) {
    rng::Stream s = rng::derive_stream(seed, "vae-test");
    Tensor t(n, c, h, w);
    s.fill_normal(t);
    return t;
}

std::string vae_param_hash(Vae& v) {
    std::vector<nn::ParamRef> ps;
    v.collect_encoder("enc", ps);
    v.collect_decoder("dec", ps);
    return group_hash(ps);
}

double dot_all(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.numel(); i++)
        acc += static_cast<double>(a.data[i]) * b.data[i];
    return acc;
}

DatasetManifest tiny_dataset(const std::filesystem::path& dir, int count, int size) {
    DatasetConfig cfg;
    cfg.train_count = count;
    cfg.test_count  = 1;
    cfg.size        = size;
    cfg.seed        = 31;
    cfg.out_dir     = dir;
    return build_dataset(cfg).train;
}

}  // namespace

TEST_CASE("image/tensor glue round trips") {
    Image img(6, 5);
    for (size_t i = 0; i < img.v.size(); i++) img.v[i] = static_cast<float>(i) * 0.01f;
    Tensor t = image_to_tensor(img);
    CHECK(t.n() == 1);
    CHECK(t.c() == 1);
    CHECK(t.h() == 6);
    CHECK(t.w() == 5);
    Image back = tensor_to_image(t);
    for (size_t i = 0; i < img.v.size(); i++) REQUIRE(back.v[i] == img.v[i]);
    Tensor multi(1, 2, 4, 4);
    CHECK_THROWS_AS(tensor_to_image(multi), PreconditionError);
}

TEST_CASE("encoder maps to a 4-channel latent at quarter resolution") {
    Vae vae;
    Tensor x = random_tensor(1, 2, 1, 32, 32);
    auto [mean, logvar] = vae.forward_moments(x);
    CHECK(mean.n() == 2);
    CHECK(mean.c() == kLatentChannels);
    CHECK(mean.h() == 8);
    CHECK(mean.w() == 8);
    CHECK(logvar.same_shape(mean));
    for (float v : logvar.data) {
        CHECK(v >= -30.0f);
        CHECK(v <= 20.0f);
    }
    Tensor bad = random_tensor(3, 1, 1, 30, 30);
    CHECK_THROWS_AS(vae.forward_moments(bad), PreconditionError);
}

TEST_CASE("decoder mirrors the encoder geometry and stays in [0,1]") {
    Vae vae;
    Tensor z = random_tensor(4, 1, kLatentChannels, 8, 8);
    Tensor y = vae.decode(z);
    CHECK(y.n() == 1);
    CHECK(y.c() == 1);
    CHECK(y.h() == 32);
    CHECK(y.w() == 32);
    for (float v : y.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    Tensor bad = random_tensor(5, 1, 3, 8, 8);
    CHECK_THROWS_AS(vae.decode(bad), PreconditionError);
}

TEST_CASE("construction and encoding are deterministic") {
    Vae a, b;
    CHECK(vae_param_hash(a) == vae_param_hash(b));
    Vae c(123);
    CHECK(vae_param_hash(a) != vae_param_hash(c));

    a.trained = b.trained = true;
    Tensor x  = random_tensor(6, 1, 1, 16, 16);
    Tensor za = a.encode(x, EncodeMode::mean);
    Tensor zb = b.encode(x, EncodeMode::mean);
    CHECK(max_abs_diff(za, zb) == 0.0f);

    Tensor s1 = a.encode(x, EncodeMode::sample, 5);
    Tensor s2 = a.encode(x, EncodeMode::sample, 5);
    Tensor s3 = a.encode(x, EncodeMode::sample, 6);
    CHECK(max_abs_diff(s1, s2) == 0.0f);
    CHECK(max_abs_diff(s1, s3) > 0.0f);
    CHECK(max_abs_diff(s1, za) > 0.0f);  // sampling adds noise
}

TEST_CASE("untrained weights are rejected where it matters") {
    Vae vae;
    Tensor x = random_tensor(7, 1, 1, 16, 16);
    CHECK_THROWS_AS(vae.encode(x, EncodeMode::mean), StateError);
    CHECK_THROWS_AS(vae.encode_scaled(x), StateError);
    Tensor z = random_tensor(8, 1, kLatentChannels, 4, 4);
    CHECK_THROWS_AS(vae.decode_scaled(z), StateError);
    vae.trained = true;
    CHECK_NOTHROW(vae.encode(x, EncodeMode::mean));
}

TEST_CASE("scaled latent helpers apply the stored scale") {
    Vae vae;
    vae.trained      = true;
    vae.latent_scale = 2.5f;
    Tensor x  = random_tensor(9, 1, 1, 16, 16);
    Tensor z  = vae.encode(x, EncodeMode::mean);
    Tensor zs = vae.encode_scaled(x);
    for (size_t i = 0; i < z.numel(); i++)
        REQUIRE(zs.data[i] == Catch::Approx(2.5f * z.data[i]).margin(1e-6));
    // decode_scaled(encode_scaled(x)) == decode(encode(x)) up to the scale round trip
    Tensor y1 = vae.decode_scaled(zs);
    Tensor y2 = vae.decode(z);
    CHECK(max_abs_diff(y1, y2) < 1e-5f);
}

TEST_CASE("encoder gradients match finite differences") {
    Vae vae;
    Tensor x = random_tensor(10, 1, 1, 8, 8);
    Tensor wm = random_tensor(11, 1, kLatentChannels, 2, 2);
    Tensor wl = random_tensor(12, 1, kLatentChannels, 2, 2);
    for (auto& v : wl.data) v *= 0.1f;  // keep the clamp inactive

    auto loss = [&](const Tensor& in) {
        auto [mean, logvar] = vae.forward_moments(in);
        return dot_all(mean, wm) + dot_all(logvar, wl);
    };

    double base = loss(x);
    (void)base;
    std::vector<nn::ParamRef> ps;
    vae.collect_encoder("enc", ps);
    nn::zero_grads(ps);
    Tensor dx = vae.encoder_backward(wm, wl);

    Tensor dir = random_tensor(13, 1, 1, 8, 8);
    const double eps = 1e-2;
    Tensor xp = x, xm = x;
    xp.add_scaled(dir, static_cast<float>(eps));
    xm.add_scaled(dir, static_cast<float>(-eps));
    double fd = (loss(xp) - loss(xm)) / (2.0 * eps);
    double an = dot_all(dx, dir);
    CHECK(std::abs(fd - an) < 6e-3 + 0.02 * std::max(std::abs(fd), std::abs(an)));

    // one parameter direction too
    for (auto& p : ps) {
        if (p.name != "enc.conv1.w") continue;
        Tensor pdir = random_tensor(14, p.w->n(), p.w->c(), p.w->h(), p.w->w());
        Tensor saved = *p.w;
        p.w->add_scaled(pdir, static_cast<float>(eps));
        double lp = loss(x);
        *p.w = saved;
        p.w->add_scaled(pdir, static_cast<float>(-eps));
        double lm = loss(x);
        *p.w = saved;
        double pfd = (lp - lm) / (2.0 * eps);
        double pan = dot_all(*p.g, pdir);
        CHECK(std::abs(pfd - pan) < 6e-3 + 0.02 * std::max(std::abs(pfd), std::abs(pan)));
    }
}

TEST_CASE("decoder gradients match finite differences") {
    Vae vae;
    Tensor z = random_tensor(15, 1, kLatentChannels, 2, 2);
    Tensor w = random_tensor(16, 1, 1, 8, 8);

    auto loss = [&](const Tensor& in) { return dot_all(vae.decode(in), w); };

    std::vector<nn::ParamRef> ps;
    vae.collect_decoder("dec", ps);
    nn::zero_grads(ps);
    vae.decode(z);
    Tensor dz = vae.decode_backward(w);

    Tensor dir = random_tensor(17, 1, kLatentChannels, 2, 2);
    const double eps = 1e-2;
    Tensor zp = z, zm = z;
    zp.add_scaled(dir, static_cast<float>(eps));
    zm.add_scaled(dir, static_cast<float>(-eps));
    double fd = (loss(zp) - loss(zm)) / (2.0 * eps);
    double an = dot_all(dz, dir);
    CHECK(std::abs(fd - an) < 6e-3 + 0.02 * std::max(std::abs(fd), std::abs(an)));
}

TEST_CASE("checkpoint round trip preserves everything") {
    auto dir = tmp_dir("ckpt");
    Vae a(77);
    a.trained      = true;
    a.latent_scale = 3.25f;
    save_vae(a, dir / "vae.json", {{"note", "test"}});

    Vae b(9999);  // different init; load must overwrite completely
    REQUIRE(vae_param_hash(a) != vae_param_hash(b));
    json meta = load_vae(b, dir / "vae.json");
    CHECK(vae_param_hash(a) == vae_param_hash(b));
    CHECK(b.latent_scale == 3.25f);
    CHECK(b.trained);
    CHECK(meta.value("note", "") == "test");
    CHECK(meta.value("kind", "") == "vae");

    // checkpoint files exist as a json manifest + flat blob
    CHECK(std::filesystem::exists(dir / "vae.json"));
    CHECK(std::filesystem::exists(dir / "vae.bin"));
}

TEST_CASE("checkpoint loading verifies hashes") {
    auto dir = tmp_dir("tamper");
    Vae a;
    a.trained = true;
    save_vae(a, dir / "vae.json", json::object());

    // flip one byte mid-blob
    {
        std::fstream f(dir / "vae.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(1000);
        char c;
        f.seekg(1000);
        f.get(c);
        c = static_cast<char>(c ^ 0x40);
        f.seekp(1000);
        f.put(c);
    }
    Vae b;
    CHECK_THROWS_AS(load_vae(b, dir / "vae.json"), FormatError);
}

TEST_CASE("a short training run reduces the loss") {
    auto data = tmp_dir("train-data");
    DatasetManifest manifest = tiny_dataset(data, 10, 64);

    Vae vae;
    VaeTrainConfig cfg;
    cfg.iterations = 90;
    cfg.batch      = 4;
    cfg.lr         = 2e-3f;
    cfg.seed       = 5;
    TrainCurve curve = train_vae(vae, manifest, cfg);

    REQUIRE(curve.losses.size() == 90);
    double head = 0.0, tail = 0.0;
    for (size_t i = 0; i < 10; i++) {
        head += curve.losses[i];
        tail += curve.losses[curve.losses.size() - 10 + i];
    }
    CHECK(tail / 10.0 < head / 10.0);
    CHECK(vae.trained);
    CHECK(vae.latent_scale > 0.0f);
    CHECK(std::isfinite(vae.latent_scale));

    // scaled train latents should now be near unit scale
    double sq = 0.0;
    size_t total = 0;
    for (size_t i = 0; i < manifest.items.size(); i++) {
        Tensor z = vae.encode_scaled(image_to_tensor(load_dataset_item(manifest, i).px));
        for (float v : z.data) sq += static_cast<double>(v) * v;
        total += z.numel();
    }
    double rms = std::sqrt(sq / static_cast<double>(total));
    CHECK(rms > 0.5);
    CHECK(rms < 2.0);
}

TEST_CASE("training is deterministic and resumes exactly") {
    auto data = tmp_dir("resume-data");
    DatasetManifest manifest = tiny_dataset(data, 6, 64);

    VaeTrainConfig full;
    full.iterations = 16;
    full.batch      = 2;
    full.seed       = 8;

    Vae straight;
    TrainCurve c_full = train_vae(straight, manifest, full);
    std::string target = vae_param_hash(straight);

    // same config, second run: bit-identical
    Vae again;
    train_vae(again, manifest, full);
    CHECK(vae_param_hash(again) == target);

    // run the first half, checkpoint with optimizer state, resume
    auto dir = tmp_dir("resume-ckpt");
    Vae half;
    nn::Adam opt;
    VaeTrainConfig first = full;
    first.iterations     = 8;
    TrainCurve c_first   = train_vae(half, manifest, first, {}, &opt);
    {
        std::vector<nn::ParamRef> ps;
        half.collect_encoder("enc", ps);
        half.collect_decoder("dec", ps);
        save_checkpoint(dir / "half.json", {{"all", ps}}, {{"kind", "vae"}}, &opt);
    }

    Vae resumed;
    nn::Adam opt2;
    {
        std::vector<nn::ParamRef> ps;
        resumed.collect_encoder("enc", ps);
        resumed.collect_decoder("dec", ps);
        load_checkpoint(dir / "half.json", {{"all", ps}});
        REQUIRE(load_optimizer(dir / "half.json", opt2, ps));
    }
    resumed.trained = true;
    VaeTrainConfig second = full;
    second.iterations     = 8;
    second.start_iter     = 8;
    TrainCurve c_second   = train_vae(resumed, manifest, second, {}, &opt2);

    CHECK(vae_param_hash(resumed) == target);
    // the stitched loss curve equals the uninterrupted one
    REQUIRE(c_first.losses.size() + c_second.losses.size() == c_full.losses.size());
    for (size_t i = 0; i < c_first.losses.size(); i++)
        CHECK(c_first.losses[i] == c_full.losses[i]);
    for (size_t i = 0; i < c_second.losses.size(); i++)
        CHECK(c_second.losses[i] == c_full.losses[8 + i]);
}

TEST_CASE("train_vae validates its inputs") {
    auto data = tmp_dir("valid");
    DatasetManifest manifest = tiny_dataset(data, 2, 64);
    Vae vae;
    VaeTrainConfig cfg;
    cfg.iterations = 0;
    CHECK_THROWS_AS(train_vae(vae, manifest, cfg), ConfigError);
    cfg.iterations = 1;
    cfg.lr         = 0.0f;
    CHECK_THROWS_AS(train_vae(vae, manifest, cfg), ConfigError);
    DatasetManifest empty;
    cfg = VaeTrainConfig{};
    CHECK_THROWS_AS(train_vae(vae, empty, cfg), PreconditionError);
}
