#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "kepil/errors.hpp"
#include "kepil/losses/losses.hpp"
#include "kepil/model/model.hpp"
#include "kepil/numerics/gradcheck.hpp"
#include "kepil/numerics/ops.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/util/binary_io.hpp"

using namespace kepil;
using namespace kepil::model;
using num::Graph;
using num::Tensor;

namespace {

const std::vector<std::string> kCorpus{
    "pleural effusion in the right lower zone.", "no pneumothorax.", "possible lung nodule in the left upper zone.",
    "pneumothorax is present in the image. Radiographic features: shape: ring; texture: speckled."};

Tokenizer tokenizer() { return Tokenizer::build(kCorpus); }

ModelConfig small_config() {
    ModelConfig c;
    c.image_height = 16;
    c.image_width = 16;
    c.patch_size = 8;
    c.embed_dim = 8;
    c.max_tokens = 24;
    c.encoder_depth = 1;
    c.mlp_hidden = 12;
    c.adapter_hidden = 6;
    return c;
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    num::Rng rng(seed);
    Tensor t({h, w});
    for (double& v : t.values()) v = rng.uniform();
    return t;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    num::Rng rng(seed);
    Tensor t({r, c});
    for (double& v : t.values()) v = rng.normal();
    return t;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
    Tensor out(t.shape());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t c = 0; c < t.cols(); ++c) out(i, c) = t(perm[i], c);
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

} // namespace

TEST_CASE("config validation") {
    auto c = small_config();
    c.text_vocab_size = 10;
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.image_width = 20;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.embed_dim = 0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.adapter_dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK(ModelConfig::from_kv(c.to_kv()) == c);
}

TEST_CASE("tokenizer specials and encoding") {
    auto t = tokenizer();
    CHECK(t.vocab()[Tokenizer::kPad] == "[PAD]");
    CHECK(t.vocab()[Tokenizer::kCls] == "[CLS]");
    auto ids = t.encode("No pneumothorax.", 64);
    CHECK(ids.front() == Tokenizer::kCls);
    CHECK(ids.size() == 4);
    CHECK(t.encode("unheard words", 64)[1] == Tokenizer::kUnk);
    CHECK(t.encode(kCorpus[3], 5).size() == 5);
    CHECK(Tokenizer(t.vocab()) == t);
}

TEST_CASE("default image grid has 16 patches") {
    ModelConfig c;
    Model m(c, tokenizer(), 1);
    CHECK(m.config().num_patches() == 16);
    auto e = m.encode_image(random_image(32, 32, 1));
    CHECK(e.patches.rows() == 16);
    CHECK(e.patches.cols() == 64);
    CHECK(e.cls.cols() == 64);
    CHECK_THROWS_AS(m.encode_image(random_image(16, 32, 1)), ShapeError);
}

TEST_CASE("zero patch projection at depth 0 gives position embeddings") {
    auto c = small_config();
    c.encoder_depth = 0;
    InitOptions init;
    init.zero_patch_projection = true;
    Model m(c, tokenizer(), 3, init);
    auto e = m.encode_image(Tensor({16, 16}, 0.0));
    const Tensor& pos = m.params().at("image.pos").value;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(e.patches(i, j) == pos(i + 1, j));
}

TEST_CASE("encoding is deterministic across model instances") {
    Model a(small_config(), tokenizer(), 7), b(small_config(), tokenizer(), 7);
    auto img = random_image(16, 16, 2);
    CHECK(a.encode_image(img).patches == b.encode_image(img).patches);
    CHECK(a.encode_image(img).cls == a.encode_image(img).cls);
    auto ids = a.tokenize(kCorpus[0]);
    CHECK(a.encode_text(ids).cls == b.encode_text(ids).cls);
    CHECK(a.encode_text(a.tokenize(kCorpus[0])).cls == a.encode_text(a.tokenize(kCorpus[0])).cls);
    Model other(small_config(), tokenizer(), 8);
    CHECK_FALSE(other.encode_text(ids).cls == a.encode_text(ids).cls);
}

TEST_CASE("single-token text gives a finite CLS") {
    Model m(small_config(), tokenizer(), 1);
    auto e = m.encode_text({Tokenizer::kCls});
    for (double v : e.cls.values()) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(m.encode_text({}), DomainError);
    CHECK_THROWS_AS(m.encode_text({Tokenizer::kCls, 10000}), DomainError);
}

TEST_CASE("appending padding leaves every real position unchanged") {
    Model m(small_config(), tokenizer(), 5);
    for (const auto& text : kCorpus) {
        auto ids = m.tokenize(text);
        if (ids.size() > 20) ids.resize(20);
        auto base = m.encode_text(ids);
        for (std::size_t extra = 1; extra <= 4; ++extra) {
            auto padded = ids;
            padded.insert(padded.end(), extra, Tokenizer::kPad);
            auto e = m.encode_text(padded);
            CHECK(e.cls == base.cls);
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (std::size_t c = 0; c < 8; ++c) CHECK(e.tokens(r, c) == base.tokens(r, c));
        }
    }
}

TEST_CASE("batched text encoding equals one-at-a-time encoding") {
    Model m(small_config(), tokenizer(), 5);
    std::vector<std::vector<std::size_t>> ids;
    for (const auto& t : kCorpus) ids.push_back(m.tokenize(t));
    Graph g(num::GradMode::Off);
    Tensor batch = m.encode_texts(g, ids).value();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto one = m.encode_text(ids[i]).cls;
        for (std::size_t c = 0; c < 8; ++c) CHECK(batch(i, c) == one(0, c));
    }
}

TEST_CASE("adapter modes") {
    auto x = random_matrix(3, 8, 4);
    InitOptions id;
    id.identity_adapters = true;
    Model ident(small_config(), tokenizer(), 1, id);
    CHECK(ident.adapt(x, Branch::Report, AdapterMode::eval()) == x);
    CHECK(ident.adapt(x, Branch::Prompt, AdapterMode::eval()) == x);

    Model m(small_config(), tokenizer(), 1);
    const auto e = m.adapt(x, Branch::Report, AdapterMode::eval());
    CHECK(m.adapt(x, Branch::Report, AdapterMode::eval()) == e);
    const auto t1 = m.adapt(x, Branch::Report, AdapterMode::training(1));
    CHECK(m.adapt(x, Branch::Report, AdapterMode::training(1)) == t1);
    CHECK_FALSE(m.adapt(x, Branch::Report, AdapterMode::training(2)) == t1);
    CHECK_FALSE(t1 == e);
    CHECK_FALSE(m.adapt(x, Branch::Prompt, AdapterMode::eval()) == e);

    auto c = small_config();
    c.adapter_dropout = 0.0;
    Model nodrop(c, tokenizer(), 1);
    CHECK(nodrop.adapt(x, Branch::Report, AdapterMode::training(9)) == nodrop.adapt(x, Branch::Report, AdapterMode::eval()));
    CHECK_THROWS_AS(m.adapt(random_matrix(2, 5, 1), Branch::Report, AdapterMode::eval()), ShapeError);
}

TEST_CASE("kqm with a single patch returns the value row") {
    Model m(small_config(), tokenizer(), 2);
    auto q = random_matrix(5, 8, 1);
    auto patch = random_matrix(1, 8, 2);
    Tensor w;
    auto out = m.kqm_attend(q, patch, &w);
    auto v = num::matmul(patch, m.params().at("kqm.wv").value);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(w(i, 0) == 1.0);
        for (std::size_t c = 0; c < 8; ++c) CHECK(out(i, c) == doctest::Approx(v(0, c)).epsilon(1e-14));
    }
}

TEST_CASE("kqm attention rows sum to one; query equivariance and patch invariance") {
    Model m(small_config(), tokenizer(), 2);
    for (std::uint64_t s = 0; s < 20; ++s) {
        const std::size_t S = 1 + s % 6, P = 1 + s % 9;
        auto q = random_matrix(S, 8, num::derive_seed(s, 1));
        auto kv = random_matrix(P, 8, num::derive_seed(s, 2));
        Tensor w;
        auto out = m.kqm_attend(q, kv, &w);
        for (std::size_t i = 0; i < S; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < P; ++j) sum += w(i, j);
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
        num::Rng rng(s);
        std::vector<std::size_t> qp(S), kp(P);
        for (std::size_t i = 0; i < S; ++i) qp[i] = i;
        for (std::size_t i = 0; i < P; ++i) kp[i] = i;
        rng.shuffle(qp);
        rng.shuffle(kp);
        CHECK(m.kqm_attend(permute_rows(q, qp), kv) == permute_rows(out, qp));
        CHECK(max_abs_diff(m.kqm_attend(q, permute_rows(kv, kp)), out) <= 1e-12);
    }
    CHECK_THROWS_AS(m.kqm_attend(random_matrix(2, 7, 1), random_matrix(3, 8, 1)), ShapeError);
}

TEST_CASE("classification head") {
    InitOptions z;
    z.zero_head = true;
    Model m(small_config(), tokenizer(), 1, z);
    auto p = m.classify(random_matrix(6, 8, 1));
    for (double v : p.values()) CHECK(v == 0.5);

    Model r(small_config(), tokenizer(), 1);
    auto a = random_matrix(1, 8, 3);
    Tensor dup({2, 8});
    for (std::size_t c = 0; c < 8; ++c) dup(0, c) = dup(1, c) = a(0, c);
    auto pd = r.classify(dup);
    CHECK(pd(0, 0) == pd(1, 0));
    auto pr = r.classify(random_matrix(50, 8, 4));
    for (double v : pr.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("end-to-end scores are finite probabilities") {
    Model m(small_config(), tokenizer(), 4);
    auto q = m.prompt_queries({kCorpus[0], kCorpus[3]});
    CHECK(q.rows() == 2);
    std::vector<Tensor> imgs;
    for (std::uint64_t s = 0; s < 3; ++s) imgs.push_back(random_image(16, 16, s));
    auto s = m.score({&imgs[0], &imgs[1], &imgs[2]}, q);
    CHECK(s.rows() == 3);
    CHECK(s.cols() == 2);
    for (double v : s.values()) {
        CHECK(std::isfinite(v));
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    // scoring one image at a time agrees with the batch
    for (std::size_t b = 0; b < 3; ++b) {
        auto one = m.score({&imgs[b]}, q);
        for (std::size_t c = 0; c < 2; ++c) CHECK(one(0, c) == s(b, c));
    }
    Tensor bad = random_image(16, 16, 1);
    bad(0, 0) = 1.5;
    CHECK_THROWS_AS(m.encode_image(bad), DomainError);
}

TEST_CASE("frozen text encoder: no gradient or change for text parameters, adapters still learn") {
    auto c = small_config();
    c.text_encoder_frozen = true;
    Model m(c, tokenizer(), 6);
    std::map<std::string, Tensor> before;
    for (const auto& p : m.params()) before[p->name] = p->value;
    Graph g;
    std::vector<std::vector<std::size_t>> ids{m.tokenize(kCorpus[0]), m.tokenize(kCorpus[1]), m.tokenize(kCorpus[2])};
    auto img0 = random_image(16, 16, 1), img1 = random_image(16, 16, 2), img2 = random_image(16, 16, 3);
    auto t = m.encode_images(g, {&img0, &img1, &img2});
    auto txt = m.adapt(g, m.encode_texts(g, ids), Branch::Report, AdapterMode::training(3));
    auto loss = losses::l_ic(m.image_cls(g, t), txt, 0.1);
    auto rep = g.backward(loss);
    for (const auto& p : m.params()) {
        if (p->name.rfind("text.", 0) == 0) {
            CHECK_FALSE(p->trainable);
            CHECK(rep.find(p->name) == nullptr);
        }
    }
    REQUIRE(rep.find("adapter.report.w1"));
    double norm = 0;
    for (double v : rep.find("adapter.report.w1")->values()) norm += v * v;
    CHECK(norm > 0.0);
    // a plain gradient step only touches parameters with gradients
    for (auto& p : m.params())
        if (auto* gr = rep.find(p->name))
            for (std::size_t i = 0; i < p->value.size(); ++i) p->value.values()[i] -= 0.1 * gr->values()[i];
    for (const auto& p : m.params())
        if (p->name.rfind("text.", 0) == 0) CHECK(p->value == before[p->name]);
    m.set_text_encoder_frozen(false);
    CHECK(m.params().at("text.tok").trainable);
}

TEST_CASE("full model gradients match central differences") {
    auto c = small_config();
    c.embed_dim = 4;
    c.mlp_hidden = 5;
    c.adapter_hidden = 3;
    c.max_tokens = 8;
    const std::vector<std::string> texts{"no pneumothorax.", "possible lung nodule.", "pleural effusion."};
    Model m(c, Tokenizer::build(texts), 11);
    auto img0 = random_image(16, 16, 1), img1 = random_image(16, 16, 2), img2 = random_image(16, 16, 3);
    std::vector<std::vector<std::size_t>> rep_ids, prompt_ids;
    for (const auto& t : texts) rep_ids.push_back(m.tokenize(t));
    prompt_ids = {m.tokenize("pneumothorax"), m.tokenize("pleural effusion")};
    losses::LabelMatrix labels(3, 2, losses::Label::Masked);
    labels(0, 0) = losses::Label::Negative;
    labels(1, 1) = losses::Label::Positive;
    labels(2, 1) = losses::Label::Positive;
    labels(2, 0) = losses::Label::Negative;
    auto build = [&](Graph& g) {
        auto t = m.encode_images(g, {&img0, &img1, &img2});
        auto txt = m.encode_texts(g, rep_ids);
        auto v1 = m.adapt(g, txt, Branch::Report, AdapterMode::training(1));
        auto v2 = m.adapt(g, txt, Branch::Report, AdapterMode::training(2));
        auto q = m.adapt(g, m.encode_texts(g, prompt_ids), Branch::Prompt, AdapterMode::eval());
        auto probs = m.classify(g, m.kqm_attend(g, q, t), 3, 2);
        return losses::total_loss(g, losses::l_cls(probs, labels), losses::l_ic(m.image_cls(g, t), v1, 0.2),
                                  losses::l_sc(v1, v2, 0.2), {1.0, 1.0, 1.0, 0.2});
    };
    auto rep = num::grad_check(build, m.params());
    REQUIRE(rep.max_rel_error);
    CHECK(*rep.max_rel_error < 1e-4);
}

TEST_CASE("checkpoint round trip and rejection") {
    Model m(small_config(), tokenizer(), 12);
    const auto bytes = m.serialize();
    Model r = Model::deserialize(bytes);
    CHECK(r.config() == m.config());
    CHECK(r.tokenizer() == m.tokenizer());
    for (const auto& p : m.params()) CHECK(r.params().at(p->name).value == p->value);
    CHECK(r.serialize() == bytes);

    auto corrupt = bytes;
    corrupt[corrupt.size() / 2] ^= 0x1;
    CHECK_THROWS_AS(Model::deserialize(corrupt), LoadError);
    CHECK_THROWS_AS(Model::deserialize(bytes.substr(0, bytes.size() - 9)), LoadError);
    CHECK_THROWS_AS(Model::deserialize("garbage"), LoadError);
    auto other = m.config();
    other.embed_dim = 16;
    CHECK_THROWS_AS(Model::deserialize(bytes, other), LoadError);
    CHECK_NOTHROW(Model::deserialize(bytes, m.config()));

    auto path = std::filesystem::temp_directory_path() / "kepil_model_test.ckpt";
    m.save(path);
    CHECK(Model::load(path).serialize() == bytes);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(Model::load(path), IoError);
}
