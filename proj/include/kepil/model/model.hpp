#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kepil/model/tokenizer.hpp"
#include "kepil/numerics/graph.hpp"

namespace kepil::model {

using num::Graph;
using num::Tensor;
using num::Var;

struct ModelConfig {
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t text_vocab_size = 0;  // taken from the tokenizer
    std::size_t max_tokens = 64;
    std::size_t encoder_depth = 2;
    std::size_t mlp_hidden = 128;
    std::size_t adapter_hidden = 64;
    double adapter_dropout = 0.5;
    bool text_encoder_frozen = false;

    std::size_t num_patches() const { return (image_height / patch_size) * (image_width / patch_size); }
    void validate() const;  // ValidationError naming the field

    // Flat key/value form used by checkpoints and run configs.
    std::map<std::string, std::string> to_kv() const;
    static ModelConfig from_kv(const std::map<std::string, std::string>& kv);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct InitOptions {
    bool zero_head = false;               // every probability starts at exactly 0.5
    bool identity_adapters = false;       // adapters start as the identity map
    bool zero_patch_projection = false;   // patch embedding ignores pixel values
    double embedding_sd = 0.1;
};

enum class Branch { Report, Prompt };

// Dropout behaviour of an adapter call.
struct AdapterMode {
    bool train = false;
    std::uint64_t seed = 0;

    static AdapterMode eval() { return {}; }
    static AdapterMode training(std::uint64_t seed) { return {true, seed}; }
};

struct PatchEmbeddings {
    Tensor patches;  // P x d
    Tensor cls;      // 1 x d
};

struct TextEmbedding {
    Tensor tokens;  // n x d (row 0 is the CLS position)
    Tensor cls;     // 1 x d
};

// Stacked encoder output for a batch of images: count blocks of P+1 rows,
// CLS row first in each block.
struct ImageTokens {
    Var tokens;
    std::size_t count = 0;
};

class Model {
public:
    Model(ModelConfig config, Tokenizer tokenizer, std::uint64_t init_seed, const InitOptions& init = {});

    const ModelConfig& config() const { return config_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    num::ParamStore& params() { return params_; }
    const num::ParamStore& params() const { return params_; }

    // Applies config().text_encoder_frozen to the trainable flags.
    void set_text_encoder_frozen(bool frozen);

    std::vector<std::size_t> tokenize(const std::string& text) const;

    // --- graph-level building blocks (batched) ---
    ImageTokens encode_images(Graph& g, const std::vector<const Tensor*>& images);
    Var image_cls(Graph& g, const ImageTokens& t);
    // CLS rows (n x d) of the encoded sequences. Ids equal to [PAD] are
    // masked out of attention.
    Var encode_texts(Graph& g, const std::vector<std::vector<std::size_t>>& ids);
    Var encode_texts_full(Graph& g, const std::vector<std::vector<std::size_t>>& ids);
    Var adapt(Graph& g, Var x, Branch branch, const AdapterMode& mode);
    // (count * S) x d: every image block attended by all S query rows.
    Var kqm_attend(Graph& g, Var queries, const ImageTokens& t);
    // Same on explicit key/value sets: blocks of rows in `patches`.
    Var kqm_attend_rows(Graph& g, Var queries, Var patches,
                        const std::vector<std::pair<std::size_t, std::size_t>>& blocks);
    Var head_logits(Graph& g, Var attended, std::size_t rows, std::size_t cols);  // rows x cols
    Var classify(Graph& g, Var attended, std::size_t rows, std::size_t cols);

    // --- value-level API (no gradients) ---
    PatchEmbeddings encode_image(const Tensor& image);
    TextEmbedding encode_text(const std::vector<std::size_t>& ids);
    Tensor adapt(const Tensor& cls, Branch branch, const AdapterMode& mode);
    Tensor kqm_attend(const Tensor& queries, const Tensor& patches, Tensor* weights = nullptr);
    Tensor classify(const Tensor& attended);  // S x d -> S x 1 probabilities

    // Adapter-output prompt embeddings (S x d), eval mode.
    Tensor prompt_queries(const std::vector<std::string>& prompts);
    // B x S probabilities for already computed queries.
    Tensor score(const std::vector<const Tensor*>& images, const Tensor& queries);

    void save(const std::filesystem::path& path) const;
    std::string serialize() const;
    // Throws LoadError on a bad checksum, format or shape, or when expected is
    // given and differs from the stored config.
    static Model load(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);
    static Model deserialize(const std::string& bytes, const std::optional<ModelConfig>& expected = std::nullopt);

private:
    struct Sequence {
        std::size_t begin;
        std::size_t count;
        std::vector<bool> mask;
    };

    Var encoder(Graph& g, Var x, const std::vector<Sequence>& seqs, const std::string& prefix);
    Var linear(Graph& g, Var x, const std::string& w, const std::string& b);
    Var p(Graph& g, const std::string& name) { return g.parameter(params_.at(name)); }
    void init_params(std::uint64_t seed, const InitOptions& init);

    ModelConfig config_;
    Tokenizer tokenizer_;
    num::ParamStore params_;
};

const char* to_string(Branch b);

} // namespace kepil::model
