#include "doctest.h"

#include "spon/error.hpp"
#include "spon/model.hpp"
#include "test_util.hpp"

#include <filesystem>
#include <fstream>

using namespace spon;
using spon::test::max_abs_diff;
using spon::test::random_tokens;
using spon::test::tiny_config;
using spon::test::tiny_model;

namespace {

Tensor rows(const Tensor& logits3, std::size_t b, std::size_t seq, std::size_t vocab) {
    Tensor out({seq, vocab});
    for (std::size_t i = 0; i < seq * vocab; ++i) out[i] = logits3[b * seq * vocab + i];
    return out;
}

std::vector<Token> corpus_prefix(std::size_t n) {
    auto all = read_corpus(spon::test::data_path("sonnets.txt"));
    all.resize(n);
    return all;
}

}  // namespace

TEST_CASE("config validation and site naming") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), InputError);
    c = tiny_config();
    c.d_ff = 0;
    CHECK_THROWS_AS(c.validate(), InputError);

    CHECK(LinearSite{1, SiteKind::DownProj}.name() == "layers.1.down_proj");
    CHECK(parse_site_kind("gate_proj") == SiteKind::GateProj);
    CHECK_THROWS_AS(parse_site_kind("w_proj"), InputError);
    const auto all = all_sites(tiny_config());
    REQUIRE(all.size() == 14);
    CHECK(all.front() == LinearSite{0, SiteKind::QProj});
    CHECK(all.back() == LinearSite{1, SiteKind::DownProj});
    CHECK_THROWS_AS(validate_site(tiny_config(), {2, SiteKind::QProj}), InputError);
    CHECK(site_in_dim(tiny_config(), SiteKind::DownProj) == 32);
    CHECK(site_out_dim(tiny_config(), SiteKind::UpProj) == 32);
}

TEST_CASE("initialisation is deterministic in the seed") {
    const Model a = init_model(tiny_config(5)), b = init_model(tiny_config(5)), c = init_model(tiny_config(6));
    CHECK(a.weights.tok_emb.bit_equal(b.weights.tok_emb));
    CHECK(a.weights.layers[1].proj[3].bit_equal(b.weights.layers[1].proj[3]));
    CHECK_FALSE(a.weights.tok_emb.bit_equal(c.weights.tok_emb));
    CHECK(a.weights.parameter_count() == 256 * 16 + 32 * 16 + 2 * (2 * 16 + 4 * 16 * 16 + 3 * 16 * 32) + 16 + 16 * 256);
}

TEST_CASE("forward shape and finiteness") {
    const Model m = tiny_model();
    std::mt19937_64 rng(1);
    const TokenBatch b{3, 7, random_tokens(21, 256, rng)};
    const Tensor logits = forward(m, b);
    CHECK(logits.shape() == Shape{3, 7, 256});
    CHECK(logits.all_finite());
}

TEST_CASE("batch rows are independent of their neighbours and order") {
    const Model m = tiny_model();
    std::mt19937_64 rng(2);
    const auto x = random_tokens(10, 256, rng), y = random_tokens(10, 256, rng);
    TokenBatch xy{2, 10, x}, yx{2, 10, y};
    xy.ids.insert(xy.ids.end(), y.begin(), y.end());
    yx.ids.insert(yx.ids.end(), x.begin(), x.end());
    const Tensor a = forward(m, xy), b = forward(m, yx);
    const Tensor single = forward(m, TokenBatch::single(x));
    CHECK(max_abs_diff(rows(a, 0, 10, 256), rows(b, 1, 10, 256)) <= 1e-6);
    CHECK(max_abs_diff(rows(a, 1, 10, 256), rows(b, 0, 10, 256)) <= 1e-6);
    CHECK(max_abs_diff(rows(a, 0, 10, 256), rows(single, 0, 10, 256)) <= 1e-6);
}

TEST_CASE("causality: later tokens never change earlier logits") {
    const Model m = tiny_model();
    std::mt19937_64 rng(3);
    auto ids = random_tokens(12, 256, rng);
    const Tensor base = forward(m, TokenBatch::single(ids));
    for (std::size_t t : {11u, 6u, 1u}) {
        auto changed = ids;
        changed[t] = (changed[t] + 17) % 256;
        const Tensor other = forward(m, TokenBatch::single(changed));
        for (std::size_t i = 0; i < t * 256; ++i) REQUIRE(other[i] == base[i]);
        double diff = 0.0;
        for (std::size_t i = t * 256; i < (t + 1) * 256; ++i) diff = std::max(diff, std::fabs(double(other[i]) - base[i]));
        CHECK(diff > 0.0);
    }
}

TEST_CASE("hooked forward matches plain forward and captures site inputs") {
    const Model m = tiny_model();
    std::mt19937_64 rng(4);
    const TokenBatch b{2, 5, random_tokens(10, 256, rng)};
    const auto sites = all_sites(m.config);
    const HookedOutput h = forward_hooked(m, b, sites);
    CHECK(h.logits.bit_equal(forward(m, b)));
    REQUIRE(h.capture.inputs.size() == sites.size());
    for (const auto& s : sites) CHECK(h.capture.inputs.at(s).shape() == Shape{10, site_in_dim(m.config, s.kind)});
    CHECK(h.capture.final_hidden.shape() == Shape{10, 16});

    // Layer-0 q_proj input is the normed embedding sum.
    Tensor emb({10, 16});
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t j = 0; j < 16; ++j)
            emb.at(i, j) = m.weights.tok_emb.at(static_cast<std::size_t>(b.ids[i]), j) + m.weights.pos_emb.at(i % 5, j);
    const Tensor expect = rms_norm(emb, m.weights.layers[0].attn_norm, m.config.rms_eps);
    CHECK(max_abs_diff(expect, h.capture.inputs.at({0, SiteKind::QProj})) <= 1e-6);
    CHECK(h.capture.inputs.at({0, SiteKind::QProj}).bit_equal(h.capture.inputs.at({0, SiteKind::VProj})));

    const std::vector<LinearSite> bad = {{5, SiteKind::QProj}};
    CHECK_THROWS_AS(forward_hooked(m, b, bad), InputError);
}

TEST_CASE("batch validation") {
    const Model m = tiny_model();
    CHECK_THROWS_AS(forward(m, TokenBatch{1, 2, {1, 256}}), InputError);
    CHECK_THROWS_AS(forward(m, TokenBatch{1, 2, {1, -1}}), InputError);
    CHECK_THROWS_AS(forward(m, TokenBatch{1, 33, std::vector<Token>(33, 0)}), InputError);
    CHECK_THROWS_AS(forward(m, TokenBatch{2, 2, {1, 2, 3}}), DimensionError);
    CHECK_THROWS_AS(forward(m, TokenBatch{0, 0, {}}), InputError);
}

TEST_CASE("next-token NLL") {
    const std::size_t vocab = 8;
    LogitsFn uniform = [&](const TokenBatch& b) { return Tensor({b.batch, b.seq, vocab}); };
    const std::vector<Token> toks = {1, 2, 3, 4, 5, 6, 7, 0, 1, 2};
    const NllResult r = next_token_nll(uniform, toks, 4);
    CHECK(r.count == 9);
    CHECK(r.mean() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
    CHECK_THROWS_AS(next_token_nll(uniform, std::vector<Token>{1}, 4), InputError);
    CHECK_THROWS_AS(next_token_nll(uniform, std::vector<Token>{1, 9}, 4), InputError);

    const Model m = tiny_model();
    std::mt19937_64 rng(5);
    const auto t = random_tokens(200, 256, rng);
    const NllResult one = next_token_nll(dense_logits(m), t, 32, 1);
    const NllResult many = next_token_nll(dense_logits(m), t, 32, 16);
    CHECK(one.count == 199);
    CHECK(many.count == 199);
    CHECK(one.total == doctest::Approx(many.total).epsilon(1e-9));
}

TEST_CASE("corpus helpers") {
    CHECK(bytes_to_tokens("A\xff") == std::vector<Token>{65, 255});
    const std::vector<Token> t(100, 1);
    const CorpusSplit s = split_corpus(t, 0.1);
    CHECK(s.train.size() == 90);
    CHECK(s.heldout.size() == 10);
    CHECK_THROWS_AS(split_corpus(t, 1.0), InputError);
    CHECK_THROWS_AS(read_corpus("/nonexistent/corpus.txt"), InputError);
}

TEST_CASE("training lowers held-out loss and is deterministic") {
    const auto corpus = corpus_prefix(6000);
    TrainHyper hyper;
    hyper.lr = 3e-3f;
    hyper.epochs = 2;
    hyper.batch = 8;
    hyper.block = 32;
    const TrainResult a = train_dense(corpus, tiny_config(7), hyper);
    CHECK(a.final_heldout_loss < a.initial_heldout_loss);
    CHECK(a.epoch_train_loss.size() == 2);
    CHECK(a.steps > 0);
    const TrainResult b = train_dense(corpus, tiny_config(7), hyper);
    CHECK(serialize_model(a.model) == serialize_model(b.model));

    // Held-out loss is reproducible from the saved model.
    const auto held = split_corpus(corpus, 0.1).heldout;
    const double again = next_token_nll(dense_logits(a.model), held, a.model.config.context_len).mean();
    CHECK(std::exp(again) == doctest::Approx(std::exp(a.final_heldout_loss)).epsilon(1e-6));

    hyper.epochs = 0;
    const TrainResult z = train_dense(corpus, tiny_config(7), hyper);
    CHECK(z.steps == 0);
    CHECK(serialize_model(z.model) == serialize_model(init_model(tiny_config(7))));
    CHECK(z.initial_heldout_loss == z.final_heldout_loss);

    hyper.block = 33;
    CHECK_THROWS_AS(train_dense(corpus, tiny_config(7), hyper), InputError);
    hyper.block = 32;
    CHECK_THROWS_AS(train_dense(corpus_prefix(20), tiny_config(7), hyper), InputError);
}

TEST_CASE("model file round trip") {
    Model m = tiny_model();
    m.weights.bias({1, SiteKind::DownProj}) = Tensor::full({16}, 0.25f);
    m.folded.push_back("deadbeef");
    const std::string bytes = serialize_model(m);
    CHECK(bytes.substr(0, 5) == "SPON1");
    const Model back = deserialize_model(bytes);
    CHECK(back.config == m.config);
    CHECK(back.folded == m.folded);
    CHECK(serialize_model(back) == bytes);
    REQUIRE(back.weights.bias({1, SiteKind::DownProj}).has_value());
    CHECK(back.weights.bias({1, SiteKind::DownProj})->bit_equal(*m.weights.bias({1, SiteKind::DownProj})));
    CHECK_FALSE(back.weights.bias({0, SiteKind::DownProj}).has_value());

    const auto path = std::filesystem::temp_directory_path() / "spon_test_model.bin";
    save_model(m, path);
    CHECK(serialize_model(load_model(path)) == bytes);
    std::filesystem::remove(path);
}

TEST_CASE("model file corruption is rejected") {
    const std::string bytes = serialize_model(tiny_model());
    CHECK_THROWS_AS(deserialize_model("SPON2" + bytes.substr(5)), FormatError);
    CHECK_THROWS_AS(deserialize_model(bytes.substr(0, 3)), FormatError);
    CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() / 2)), FormatError);
    CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() - 1)), FormatError);
    std::string flipped = bytes;
    flipped[bytes.size() - 100] ^= 0x01;
    CHECK_THROWS_AS(deserialize_model(flipped), FormatError);
    std::string header = bytes;
    const auto pos = header.find("\"schema_version\":1");
    REQUIRE(pos != std::string::npos);
    header[pos + 17] = '2';
    CHECK_THROWS_AS(deserialize_model(header), FormatError);
    CHECK_THROWS_AS(load_model("/nonexistent/model.bin"), Error);
}
