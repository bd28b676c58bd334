#pragma once

#include "spon/autograd.hpp"
#include "spon/tensor.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spon {

using Token = std::int32_t;

struct ModelConfig {
    std::size_t vocab_size = 256;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t context_len = 64;
    float rms_eps = 1e-5f;
    std::uint64_t seed = 0;

    // Throws InputError when a dimension is zero or d_model % n_heads != 0.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// The seven linear maps of a Llama-style block, in forward execution order.
enum class SiteKind : std::uint8_t { QProj, KProj, VProj, OProj, GateProj, UpProj, DownProj };

inline constexpr std::array<SiteKind, 7> kAllSiteKinds = {SiteKind::QProj,    SiteKind::KProj,  SiteKind::VProj,
                                                          SiteKind::OProj,    SiteKind::GateProj,
                                                          SiteKind::UpProj,   SiteKind::DownProj};

std::string_view site_kind_name(SiteKind kind);
// Accepts the names "q_proj" ... "down_proj"; throws InputError otherwise.
SiteKind parse_site_kind(std::string_view name);

struct LinearSite {
    std::size_t layer = 0;
    SiteKind kind = SiteKind::QProj;

    auto operator<=>(const LinearSite&) const = default;
    std::string name() const;  // "layers.<i>.<kind>"
};

template <class T>
using SiteMap = std::map<LinearSite, T>;

// Every (layer, kind) pair for the given kinds, in forward order.
std::vector<LinearSite> sites_for(const ModelConfig& config, std::span<const SiteKind> kinds);
std::vector<LinearSite> all_sites(const ModelConfig& config);
void validate_site(const ModelConfig& config, const LinearSite& site);

std::size_t site_in_dim(const ModelConfig& config, SiteKind kind);
std::size_t site_out_dim(const ModelConfig& config, SiteKind kind);

struct LayerWeights {
    Tensor attn_norm;                          // [d]
    Tensor mlp_norm;                           // [d]
    std::array<Tensor, 7> proj;                // [d_in, d_out], indexed by SiteKind
    std::array<std::optional<Tensor>, 7> bias; // [d_out] when present
};

struct ModelWeights {
    Tensor tok_emb;    // [vocab, d]
    Tensor pos_emb;    // [context, d]
    std::vector<LayerWeights> layers;
    Tensor final_norm; // [d]
    Tensor unembed;    // [d, vocab]

    const Tensor& weight(const LinearSite& s) const { return layers.at(s.layer).proj[static_cast<int>(s.kind)]; }
    Tensor& weight(const LinearSite& s) { return layers.at(s.layer).proj[static_cast<int>(s.kind)]; }
    const std::optional<Tensor>& bias(const LinearSite& s) const {
        return layers.at(s.layer).bias[static_cast<int>(s.kind)];
    }
    std::optional<Tensor>& bias(const LinearSite& s) { return layers.at(s.layer).bias[static_cast<int>(s.kind)]; }

    // (name, tensor) for every stored tensor in canonical order. Bias tensors
    // appear only when present.
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::size_t parameter_count() const;
};

struct Model {
    ModelConfig config;
    ModelWeights weights;
    // Fingerprints of spontaneous-parameter artifacts already folded into the
    // bias tensors; persisted in the model file header.
    std::vector<std::string> folded;
};

// Deterministic initialisation from config.seed.
Model init_model(const ModelConfig& config);
// Throws FormatError when a tensor shape disagrees with the config.
void validate_weights(const Model& model);

// A [batch, seq] block of token ids.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<Token> ids;  // row-major, batch * seq

    static TokenBatch single(std::span<const Token> tokens);
};

void validate_batch(const ModelConfig& config, const TokenBatch& batch);

// Receives each linear site's raw input before masking. An observer may update
// the threshold or site_bias maps the forward pass was given; entries for the
// observed site are read after the callback returns.
class SiteObserver {
public:
    virtual ~SiteObserver() = default;
    virtual void on_site_input(const LinearSite& site, const Tensor& input) = 0;
};

struct MaskCounter {
    SiteMap<std::uint64_t> masked;
    SiteMap<std::uint64_t> total;

    void add(const LinearSite& site, std::uint64_t n_masked, std::uint64_t n_total);
    double fraction(const LinearSite& site) const;
    double overall() const;
};

struct ForwardOptions {
    // Per-site magnitude thresholds; sites absent from the map run dense.
    const SiteMap<float>* thresholds = nullptr;
    // Constant spontaneous activations added to the (masked) site input.
    const SiteMap<Tensor>* alpha = nullptr;
    // Trainable spontaneous activations on the tape (graph mode only).
    const SiteMap<ag::Var>* alpha_vars = nullptr;
    // Extra output bias per site, added after any bias stored in the weights.
    const SiteMap<Tensor>* site_bias = nullptr;
    SiteObserver* observer = nullptr;
    MaskCounter* counter = nullptr;
};

// Model parameters bound onto a tape.
struct GraphWeights {
    struct Layer {
        ag::Var attn_norm, mlp_norm;
        std::array<ag::Var, 7> proj;
        std::array<std::optional<ag::Var>, 7> bias;
    };
    ag::Var tok_emb, pos_emb, final_norm, unembed;
    std::vector<Layer> layers;

    // All variables in ModelWeights::named_tensors() order.
    std::vector<ag::Var> all() const;
};

GraphWeights bind_weights(ag::Tape& tape, const ModelWeights& weights, bool trainable);

struct GraphOutput {
    ag::Var logits;        // [batch*seq, vocab]
    ag::Var final_hidden;  // [batch*seq, d], residual stream before the final norm
};

GraphOutput forward_graph(ag::Tape& tape, const GraphWeights& w, const ModelConfig& config, const TokenBatch& batch,
                          const ForwardOptions& options = {});

// Logits [batch, seq, vocab].
Tensor forward(const Model& model, const TokenBatch& batch, const ForwardOptions& options = {});

struct HookCapture {
    SiteMap<Tensor> inputs;  // [batch*seq, d_in(site)]
    Tensor final_hidden;     // [batch*seq, d_model]
};

struct HookedOutput {
    Tensor logits;
    HookCapture capture;
};

// forward() plus read-only capture of each requested site's input (as it
// arrives at the site, before any masking) and of the final residual stream.
HookedOutput forward_hooked(const Model& model, const TokenBatch& batch, std::span<const LinearSite> sites,
                            const ForwardOptions& options = {});

// ---- Language-model loss

// Produces logits [batch, seq, vocab] for a batch.
using LogitsFn = std::function<Tensor(const TokenBatch&)>;

struct NllResult {
    double total = 0.0;       // summed negative log-likelihood, nats
    std::uint64_t count = 0;  // predicted tokens
    double mean() const { return count ? total / static_cast<double>(count) : 0.0; }
};

// Next-token NLL over non-overlapping blocks of `context` inputs. Each block
// predicts tokens [s+1, s+context]; the final block may be shorter.
NllResult next_token_nll(const LogitsFn& fn, std::span<const Token> tokens, std::size_t context,
                         std::size_t blocks_per_batch = 16);

LogitsFn dense_logits(const Model& model);

// ---- Corpus helpers

std::vector<Token> bytes_to_tokens(std::string_view bytes);
std::vector<Token> read_corpus(const std::filesystem::path& path);

struct CorpusSplit {
    std::vector<Token> train;
    std::vector<Token> heldout;
};
// Last `heldout_fraction` of the tokens form the held-out split.
CorpusSplit split_corpus(std::span<const Token> tokens, double heldout_fraction = 0.1);

// ---- Training

struct AdamConfig {
    float lr = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    Adam(std::vector<Shape> shapes, AdamConfig config);
    void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
    std::uint64_t steps() const noexcept { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::uint64_t t_ = 0;
};

struct TrainHyper {
    float lr = 3e-4f;
    std::size_t epochs = 5;
    std::size_t batch = 16;
    std::size_t block = 64;
    double heldout_fraction = 0.1;
};

struct TrainResult {
    Model model;
    double initial_heldout_loss = 0.0;
    double final_heldout_loss = 0.0;
    std::vector<double> epoch_train_loss;
    std::uint64_t steps = 0;
};

// Next-byte training of a freshly initialised model on the train split of
// `corpus`. Deterministic given config.seed.
TrainResult train_dense(std::span<const Token> corpus, const ModelConfig& config, const TrainHyper& hyper);

// ---- Model file I/O ("SPON1" container)

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
std::string serialize_model(const Model& model);
Model deserialize_model(std::string_view bytes);

}  // namespace spon
