#include "kepil/model/model.hpp"

#include <cmath>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/numerics/ops.hpp"
#include "kepil/numerics/random.hpp"
#include "kepil/util/binary_io.hpp"
#include "kepil/util/strings.hpp"

namespace kepil::model {

namespace ops = num::ops;

const char* to_string(Branch b) { return b == Branch::Report ? "report" : "prompt"; }

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ValidationError("model." + field + ": " + why);
    };
    if (patch_size == 0) fail("patch_size", "must be positive");
    if (image_height == 0 || image_height % patch_size != 0)
        fail("image_height", "must be a positive multiple of patch_size");
    if (image_width == 0 || image_width % patch_size != 0)
        fail("image_width", "must be a positive multiple of patch_size");
    if (embed_dim == 0) fail("embed_dim", "must be positive");
    if (max_tokens < 1) fail("max_tokens", "must be at least 1");
    if (mlp_hidden == 0) fail("mlp_hidden", "must be positive");
    if (adapter_hidden == 0) fail("adapter_hidden", "must be positive");
    if (!(adapter_dropout >= 0.0 && adapter_dropout < 1.0)) fail("adapter_dropout", "must lie in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
    return {{"image_height", std::to_string(image_height)},
            {"image_width", std::to_string(image_width)},
            {"patch_size", std::to_string(patch_size)},
            {"embed_dim", std::to_string(embed_dim)},
            {"text_vocab_size", std::to_string(text_vocab_size)},
            {"max_tokens", std::to_string(max_tokens)},
            {"encoder_depth", std::to_string(encoder_depth)},
            {"mlp_hidden", std::to_string(mlp_hidden)},
            {"adapter_hidden", std::to_string(adapter_hidden)},
            {"adapter_dropout", util::format_double(adapter_dropout)},
            {"text_encoder_frozen", text_encoder_frozen ? "true" : "false"}};
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    for (const auto& [k, v] : kv) {
        const std::string field = "model." + k;
        if (k == "image_height") c.image_height = util::parse_size(field, v);
        else if (k == "image_width") c.image_width = util::parse_size(field, v);
        else if (k == "patch_size") c.patch_size = util::parse_size(field, v);
        else if (k == "embed_dim") c.embed_dim = util::parse_size(field, v);
        else if (k == "text_vocab_size") c.text_vocab_size = util::parse_size(field, v);
        else if (k == "max_tokens") c.max_tokens = util::parse_size(field, v);
        else if (k == "encoder_depth") c.encoder_depth = util::parse_size(field, v);
        else if (k == "mlp_hidden") c.mlp_hidden = util::parse_size(field, v);
        else if (k == "adapter_hidden") c.adapter_hidden = util::parse_size(field, v);
        else if (k == "adapter_dropout") c.adapter_dropout = util::parse_double(field, v);
        else if (k == "text_encoder_frozen") c.text_encoder_frozen = util::parse_bool(field, v);
        else throw ValidationError(field + ": unknown key");
    }
    return c;
}

Model::Model(ModelConfig config, Tokenizer tokenizer, std::uint64_t init_seed, const InitOptions& init)
    : config_(config), tokenizer_(std::move(tokenizer)) {
    config_.text_vocab_size = tokenizer_.size();
    config_.validate();
    init_params(init_seed, init);
    set_text_encoder_frozen(config_.text_encoder_frozen);
}

void Model::set_text_encoder_frozen(bool frozen) {
    config_.text_encoder_frozen = frozen;
    params_.set_trainable_prefix("text.", !frozen);
}

void Model::init_params(std::uint64_t seed, const InitOptions& init) {
    const std::size_t d = config_.embed_dim;
    const std::size_t pp = config_.patch_size * config_.patch_size;
    const std::size_t P = config_.num_patches();
    const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config_.encoder_depth)));

    auto normal = [&](const std::string& name, num::Shape shape, double sd) {
        num::Rng rng(num::derive_seed(seed, util::fnv1a64(name)));
        Tensor t(shape);
        for (double& v : t.values()) v = rng.normal(0.0, sd);
        params_.add(name, std::move(t));
    };
    auto fill = [&](const std::string& name, num::Shape shape, double value) {
        params_.add(name, Tensor(std::move(shape), value));
    };
    auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

    auto blocks = [&](const std::string& prefix) {
        for (std::size_t l = 0; l < config_.encoder_depth; ++l) {
            const std::string b = prefix + "block" + std::to_string(l) + ".";
            fill(b + "ln1.g", {1, d}, 1.0);
            fill(b + "ln1.b", {1, d}, 0.0);
            normal(b + "attn.wq", {d, d}, fan_in(d));
            normal(b + "attn.wk", {d, d}, fan_in(d));
            normal(b + "attn.wv", {d, d}, fan_in(d));
            normal(b + "attn.wo", {d, d}, fan_in(d) * depth_scale);
            fill(b + "ln2.g", {1, d}, 1.0);
            fill(b + "ln2.b", {1, d}, 0.0);
            normal(b + "mlp.w1", {d, config_.mlp_hidden}, fan_in(d));
            fill(b + "mlp.b1", {1, config_.mlp_hidden}, 0.0);
            normal(b + "mlp.w2", {config_.mlp_hidden, d}, fan_in(config_.mlp_hidden) * depth_scale);
            fill(b + "mlp.b2", {1, d}, 0.0);
        }
    };

    if (init.zero_patch_projection) {
        fill("image.patch.w", {pp, d}, 0.0);
    } else {
        normal("image.patch.w", {pp, d}, fan_in(pp));
    }
    fill("image.patch.b", {1, d}, 0.0);
    normal("image.cls", {1, d}, init.embedding_sd);
    normal("image.pos", {P + 1, d}, init.embedding_sd);
    blocks("image.");

    normal("text.tok", {config_.text_vocab_size, d}, init.embedding_sd);
    normal("text.pos", {config_.max_tokens, d}, init.embedding_sd);
    blocks("text.");

    for (const char* branch : {"report", "prompt"}) {
        const std::string a = std::string("adapter.") + branch + ".";
        normal(a + "w1", {d, config_.adapter_hidden}, fan_in(d));
        fill(a + "b1", {1, config_.adapter_hidden}, 0.0);
        if (init.identity_adapters) {
            fill(a + "w2", {config_.adapter_hidden, d}, 0.0);
        } else {
            normal(a + "w2", {config_.adapter_hidden, d}, fan_in(config_.adapter_hidden));
        }
        fill(a + "b2", {1, d}, 0.0);
    }

    normal("kqm.wq", {d, d}, fan_in(d));
    normal("kqm.wk", {d, d}, fan_in(d));
    normal("kqm.wv", {d, d}, fan_in(d));
    if (init.zero_head) {
        fill("head.w", {d, 1}, 0.0);
    } else {
        normal("head.w", {d, 1}, fan_in(d));
    }
    fill("head.b", {1, 1}, 0.0);
}

std::vector<std::size_t> Model::tokenize(const std::string& text) const {
    return tokenizer_.encode(text, config_.max_tokens);
}

Var Model::linear(Graph& g, Var x, const std::string& w, const std::string& b) {
    return ops::add_row(ops::matmul(x, p(g, w)), p(g, b));
}

Var Model::encoder(Graph& g, Var x, const std::vector<Sequence>& seqs, const std::string& prefix) {
    std::vector<ops::AttentionBlock> blocks;
    blocks.reserve(seqs.size());
    for (const auto& s : seqs) blocks.push_back({s.begin, s.count, s.begin, s.count, s.mask});
    const double scale = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim));
    for (std::size_t l = 0; l < config_.encoder_depth; ++l) {
        const std::string b = prefix + "block" + std::to_string(l) + ".";
        Var h = ops::layer_norm(x, p(g, b + "ln1.g"), p(g, b + "ln1.b"));
        Var q = ops::matmul(h, p(g, b + "attn.wq"));
        Var k = ops::matmul(h, p(g, b + "attn.wk"));
        Var v = ops::matmul(h, p(g, b + "attn.wv"));
        Var a = ops::attention(q, k, v, blocks, scale);
        x = ops::add(x, ops::matmul(a, p(g, b + "attn.wo")));
        Var h2 = ops::layer_norm(x, p(g, b + "ln2.g"), p(g, b + "ln2.b"));
        Var m = ops::gelu(linear(g, h2, b + "mlp.w1", b + "mlp.b1"));
        x = ops::add(x, linear(g, m, b + "mlp.w2", b + "mlp.b2"));
    }
    return x;
}

ImageTokens Model::encode_images(Graph& g, const std::vector<const Tensor*>& images) {
    if (images.empty()) throw ShapeError("encode_images: no images");
    const std::size_t H = config_.image_height, W = config_.image_width, ps = config_.patch_size;
    const std::size_t P = config_.num_patches(), B = images.size(), gw = W / ps;
    Tensor x({B * P, ps * ps});
    for (std::size_t b = 0; b < B; ++b) {
        const Tensor& img = *images[b];
        if (img.shape() != num::Shape{H, W})
            throw ShapeError("encode_image: expected a " + std::to_string(H) + "x" + std::to_string(W) +
                             " image, got " + num::shape_str(img.shape()));
        for (double v : img.values())
            if (!(v >= 0.0 && v <= 1.0)) throw DomainError("encode_image: pixel values must lie in [0, 1]");
        for (std::size_t pi = 0; pi < P; ++pi) {
            const std::size_t pr = pi / gw, pc = pi % gw;
            auto row = x.row(b * P + pi);
            for (std::size_t r = 0; r < ps; ++r)
                for (std::size_t c = 0; c < ps; ++c) row[r * ps + c] = img(pr * ps + r, pc * ps + c);
        }
    }
    Var patches = linear(g, g.constant(std::move(x)), "image.patch.w", "image.patch.b");
    Var table = ops::concat_rows({p(g, "image.cls"), patches});
    std::vector<std::size_t> idx, pos;
    idx.reserve(B * (P + 1));
    pos.reserve(B * (P + 1));
    std::vector<Sequence> seqs;
    for (std::size_t b = 0; b < B; ++b) {
        idx.push_back(0);
        pos.push_back(0);
        for (std::size_t i = 0; i < P; ++i) {
            idx.push_back(1 + b * P + i);
            pos.push_back(1 + i);
        }
        seqs.push_back({b * (P + 1), P + 1, {}});
    }
    Var tokens = ops::add(ops::gather_rows(table, idx), ops::gather_rows(p(g, "image.pos"), pos));
    return {encoder(g, tokens, seqs, "image."), B};
}

Var Model::image_cls(Graph&, const ImageTokens& t) {
    const std::size_t P = config_.num_patches();
    std::vector<std::size_t> idx(t.count);
    for (std::size_t b = 0; b < t.count; ++b) idx[b] = b * (P + 1);
    return ops::gather_rows(t.tokens, idx);
}

Var Model::encode_texts_full(Graph& g, const std::vector<std::vector<std::size_t>>& ids) {
    if (ids.empty()) throw ShapeError("encode_texts: no sequences");
    std::vector<std::size_t> all, pos;
    std::vector<Sequence> seqs;
    for (const auto& seq : ids) {
        if (seq.empty()) throw DomainError("encode_text: empty token sequence");
        if (seq.size() > config_.max_tokens)
            throw DomainError("encode_text: " + std::to_string(seq.size()) + " tokens exceed max_tokens " +
                              std::to_string(config_.max_tokens));
        Sequence s{all.size(), seq.size(), {}};
        bool any_pad = false;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq[i] >= config_.text_vocab_size)
                throw DomainError("encode_text: token id " + std::to_string(seq[i]) + " outside vocabulary of " +
                                  std::to_string(config_.text_vocab_size));
            any_pad |= seq[i] == Tokenizer::kPad;
            all.push_back(seq[i]);
            pos.push_back(i);
        }
        if (any_pad) {
            s.mask.resize(seq.size());
            for (std::size_t i = 0; i < seq.size(); ++i) s.mask[i] = seq[i] != Tokenizer::kPad;
        }
        seqs.push_back(std::move(s));
    }
    Var x = ops::add(ops::gather_rows(p(g, "text.tok"), all), ops::gather_rows(p(g, "text.pos"), pos));
    return encoder(g, x, seqs, "text.");
}

Var Model::encode_texts(Graph& g, const std::vector<std::vector<std::size_t>>& ids) {
    Var full = encode_texts_full(g, ids);
    std::vector<std::size_t> cls;
    std::size_t off = 0;
    for (const auto& seq : ids) {
        cls.push_back(off);
        off += seq.size();
    }
    return ops::gather_rows(full, cls);
}

Var Model::adapt(Graph& g, Var x, Branch branch, const AdapterMode& mode) {
    if (x.value().rank() != 2 || x.cols() != config_.embed_dim)
        throw ShapeError("adapt: expected rows of width " + std::to_string(config_.embed_dim));
    const std::string a = std::string("adapter.") + to_string(branch) + ".";
    Var h = ops::gelu(linear(g, x, a + "w1", a + "b1"));
    if (mode.train && config_.adapter_dropout > 0.0) h = ops::dropout(h, config_.adapter_dropout, mode.seed);
    return ops::add(x, linear(g, h, a + "w2", a + "b2"));
}

Var Model::kqm_attend_rows(Graph& g, Var queries, Var patches,
                           const std::vector<std::pair<std::size_t, std::size_t>>& blocks) {
    const std::size_t d = config_.embed_dim;
    if (queries.value().rank() != 2 || queries.cols() != d || patches.value().rank() != 2 || patches.cols() != d)
        throw ShapeError("kqm_attend: queries and patches must have width " + std::to_string(d));
    Var q = ops::matmul(queries, p(g, "kqm.wq"));
    Var k = ops::matmul(patches, p(g, "kqm.wk"));
    Var v = ops::matmul(patches, p(g, "kqm.wv"));
    std::vector<ops::AttentionBlock> ab;
    ab.reserve(blocks.size());
    for (const auto& [begin, count] : blocks) ab.push_back({0, queries.rows(), begin, count, {}});
    return ops::attention(q, k, v, ab, 1.0 / std::sqrt(static_cast<double>(d)));
}

Var Model::kqm_attend(Graph& g, Var queries, const ImageTokens& t) {
    const std::size_t P = config_.num_patches();
    std::vector<std::pair<std::size_t, std::size_t>> blocks;
    for (std::size_t b = 0; b < t.count; ++b) blocks.emplace_back(b * (P + 1) + 1, P);
    return kqm_attend_rows(g, queries, t.tokens, blocks);
}

Var Model::head_logits(Graph& g, Var attended, std::size_t rows, std::size_t cols) {
    if (attended.value().rank() != 2 || attended.cols() != config_.embed_dim || attended.rows() != rows * cols)
        throw ShapeError("classify: attended rows do not match " + std::to_string(rows) + "x" + std::to_string(cols));
    Var logits = linear(g, attended, "head.w", "head.b");
    return ops::reshape(logits, {rows, cols});
}

Var Model::classify(Graph& g, Var attended, std::size_t rows, std::size_t cols) {
    return ops::sigmoid(head_logits(g, attended, rows, cols));
}

PatchEmbeddings Model::encode_image(const Tensor& image) {
    Graph g(num::GradMode::Off);
    auto t = encode_images(g, {&image});
    const Tensor& all = t.tokens.value();
    const std::size_t P = config_.num_patches(), d = config_.embed_dim;
    PatchEmbeddings out{Tensor({P, d}), Tensor({1, d})};
    std::copy(all.row(0).begin(), all.row(0).end(), out.cls.values().begin());
    std::copy(all.values().begin() + static_cast<std::ptrdiff_t>(d), all.values().end(), out.patches.values().begin());
    return out;
}

TextEmbedding Model::encode_text(const std::vector<std::size_t>& ids) {
    Graph g(num::GradMode::Off);
    Var full = encode_texts_full(g, {ids});
    TextEmbedding out{full.value(), Tensor({1, config_.embed_dim})};
    std::copy(out.tokens.row(0).begin(), out.tokens.row(0).end(), out.cls.values().begin());
    return out;
}

Tensor Model::adapt(const Tensor& cls, Branch branch, const AdapterMode& mode) {
    Graph g(num::GradMode::Off);
    return adapt(g, g.constant(cls), branch, mode).value();
}

Tensor Model::kqm_attend(const Tensor& queries, const Tensor& patches, Tensor* weights) {
    Graph g(num::GradMode::Off);
    Var out = kqm_attend_rows(g, g.constant(queries), g.constant(patches), {{0, patches.rows()}});
    if (weights) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim));
        Tensor q = num::matmul(queries, params_.at("kqm.wq").value);
        Tensor k = num::matmul(patches, params_.at("kqm.wk").value);
        Tensor v = num::matmul(patches, params_.at("kqm.wv").value);
        *weights = ops::attention_values(q, k, v, scale).weights;
    }
    return out.value();
}

Tensor Model::classify(const Tensor& attended) {
    Graph g(num::GradMode::Off);
    return classify(g, g.constant(attended), attended.rows(), 1).value();
}

Tensor Model::prompt_queries(const std::vector<std::string>& prompts) {
    if (prompts.empty()) throw ShapeError("prompt_queries: no prompts");
    std::vector<std::vector<std::size_t>> ids;
    for (const auto& p : prompts) ids.push_back(tokenize(p));
    Graph g(num::GradMode::Off);
    return adapt(g, encode_texts(g, ids), Branch::Prompt, AdapterMode::eval()).value();
}

Tensor Model::score(const std::vector<const Tensor*>& images, const Tensor& queries) {
    Graph g(num::GradMode::Off);
    auto t = encode_images(g, images);
    Var att = kqm_attend(g, g.constant(queries), t);
    return classify(g, att, images.size(), queries.rows()).value();
}

// --- checkpoints ---

namespace {
constexpr const char* kMagic = "KEPIL-CHECKPOINT";
constexpr int kFormatVersion = 1;
}

std::string Model::serialize() const {
    std::ostringstream head;
    head << kMagic << "\nversion " << kFormatVersion << "\nconfig\n";
    for (const auto& [k, v] : config_.to_kv()) head << k << '=' << v << '\n';
    head << "vocab " << tokenizer_.size() << '\n';
    for (const auto& t : tokenizer_.vocab()) head << t << '\n';
    head << "params " << params_.size() << '\n';
    util::ByteWriter w;
    w.raw(head.str());
    for (const auto& prm : params_) {
        w.str(prm->name);
        w.u32(static_cast<std::uint32_t>(prm->value.rank()));
        for (auto dim : prm->value.shape()) w.u64(dim);
        for (double v : prm->value.values()) w.f64(v);
    }
    const auto sum = util::fnv1a64(w.bytes());
    w.u64(sum);
    return w.bytes();
}

void Model::save(const std::filesystem::path& path) const { util::write_file(path, serialize()); }

Model Model::deserialize(const std::string& bytes, const std::optional<ModelConfig>& expected) {
    if (bytes.size() < 8) throw LoadError("checkpoint: file too short");
    const std::string_view payload(bytes.data(), bytes.size() - 8);
    util::ByteReader tail(std::string_view(bytes).substr(bytes.size() - 8), "checkpoint");
    if (tail.u64() != util::fnv1a64(payload)) throw LoadError("checkpoint: checksum mismatch");

    std::size_t at = 0;
    auto line = [&]() {
        const auto nl = payload.find('\n', at);
        if (nl == std::string_view::npos) throw LoadError("checkpoint: truncated header");
        std::string s(payload.substr(at, nl - at));
        at = nl + 1;
        return s;
    };
    if (line() != kMagic) throw LoadError("checkpoint: bad magic");
    if (line() != "version " + std::to_string(kFormatVersion)) throw LoadError("checkpoint: unsupported version");
    if (line() != "config") throw LoadError("checkpoint: missing config section");
    std::map<std::string, std::string> kv;
    std::string l;
    while ((l = line()).rfind("vocab ", 0) != 0) {
        const auto eq = l.find('=');
        if (eq == std::string::npos) throw LoadError("checkpoint: bad config line '" + l + "'");
        kv[l.substr(0, eq)] = l.substr(eq + 1);
    }
    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_kv(kv);
    } catch (const ValidationError& e) {
        throw LoadError(std::string("checkpoint: ") + e.what());
    }
    if (expected && !(*expected == cfg)) throw LoadError("checkpoint: model config does not match the expected config");
    const std::size_t nvocab = util::parse_size("vocab", l.substr(6));
    std::vector<std::string> vocab;
    for (std::size_t i = 0; i < nvocab; ++i) vocab.push_back(line());
    l = line();
    if (l.rfind("params ", 0) != 0) throw LoadError("checkpoint: missing params section");
    const std::size_t nparams = util::parse_size("params", l.substr(7));

    Tokenizer tok;
    try {
        tok = Tokenizer(vocab);
    } catch (const ValidationError& e) {
        throw LoadError(std::string("checkpoint: ") + e.what());
    }
    if (tok.size() != cfg.text_vocab_size) throw LoadError("checkpoint: vocabulary size disagrees with config");
    Model m(cfg, std::move(tok), 0);
    if (nparams != m.params_.size()) throw LoadError("checkpoint: parameter count mismatch");
    util::ByteReader r(payload.substr(at), "checkpoint");
    for (std::size_t i = 0; i < nparams; ++i) {
        const std::string name = r.str();
        auto* prm = m.params_.find(name);
        if (!prm) throw LoadError("checkpoint: unexpected parameter " + name);
        const auto rank = r.u32();
        num::Shape shape(rank);
        for (auto& dim : shape) dim = r.u64();
        if (shape != prm->value.shape())
            throw LoadError("checkpoint: parameter " + name + " has shape " + num::shape_str(shape) + ", expected " +
                            num::shape_str(prm->value.shape()));
        for (double& v : prm->value.values()) v = r.f64();
    }
    if (!r.done()) throw LoadError("checkpoint: trailing bytes");
    m.set_text_encoder_frozen(cfg.text_encoder_frozen);
    return m;
}

Model Model::load(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    try {
        return deserialize(util::read_file(path), expected);
    } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

} // namespace kepil::model
