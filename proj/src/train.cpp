#include "spon/error.hpp"
#include "spon/kernels.hpp"
#include "spon/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace spon {

Adam::Adam(std::vector<Shape> shapes, AdamConfig config) : cfg_(config) {
    for (Shape& s : shapes) {
        m_.emplace_back(s);
        v_.emplace_back(std::move(s));
    }
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw DimensionError("adam: parameter count changed between steps");
    ++t_;
    const float bc1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_)));
    const float bc2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_)));
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (p.shape() != m_[i].shape() || grads[i].shape() != p.shape())
            throw DimensionError("adam: gradient shape does not match parameter");
        require_finite(grads[i], "gradient");
        k.adam_update(p.mutable_ptr(), grads[i].ptr(), m_[i].mutable_ptr(), v_[i].mutable_ptr(), p.numel(), cfg_.lr,
                      cfg_.beta1, cfg_.beta2, cfg_.eps, bc1, bc2);
    }
}

TrainResult train_dense(std::span<const Token> corpus, const ModelConfig& config, const TrainHyper& hyper) {
    config.validate();
    if (hyper.batch == 0 || hyper.block == 0) throw InputError("batch and block must be >= 1");
    if (hyper.block > config.context_len)
        throw InputError("block size " + std::to_string(hyper.block) + " exceeds context length " +
                         std::to_string(config.context_len));
    const CorpusSplit split = split_corpus(corpus, hyper.heldout_fraction);
    if (split.train.size() < hyper.block + 1)
        throw InputError("corpus (" + std::to_string(split.train.size()) + " training tokens) is shorter than block size " +
                         std::to_string(hyper.block) + " + 1");
    if (split.heldout.size() < 2) throw InputError("held-out split needs at least 2 tokens");

    TrainResult result;
    result.model = init_model(config);
    Model& model = result.model;
    result.initial_heldout_loss = next_token_nll(dense_logits(model), split.heldout, config.context_len).mean();

    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + hyper.block + 1 <= split.train.size(); s += hyper.block) starts.push_back(s);

    std::vector<Shape> shapes;
    for (const auto& [name, t] : model.weights.named_tensors()) shapes.push_back(t->shape());
    Adam adam(std::move(shapes), AdamConfig{hyper.lr});
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(starts.begin(), starts.end(), rng);
        double loss_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < starts.size(); b0 += hyper.batch) {
            const std::size_t nb = std::min(hyper.batch, starts.size() - b0);
            TokenBatch batch{nb, hyper.block, {}};
            std::vector<Token> targets;
            batch.ids.reserve(nb * hyper.block);
            targets.reserve(nb * hyper.block);
            for (std::size_t b = 0; b < nb; ++b) {
                const auto s = static_cast<std::ptrdiff_t>(starts[b0 + b]);
                const auto len = static_cast<std::ptrdiff_t>(hyper.block);
                batch.ids.insert(batch.ids.end(), split.train.begin() + s, split.train.begin() + s + len);
                targets.insert(targets.end(), split.train.begin() + s + 1, split.train.begin() + s + len + 1);
            }
            ag::Tape tape;
            const GraphWeights gw = bind_weights(tape, model.weights, true);
            const GraphOutput out = forward_graph(tape, gw, config, batch);
            const ag::Var loss = ag::cross_entropy(out.logits, targets);
            const std::vector<ag::Var> params = gw.all();
            const std::vector<Tensor> grads = tape.gradients(loss, params);
            std::vector<Tensor*> targets_w;
            for (auto& [name, t] : model.weights.named_tensors()) targets_w.push_back(t);
            adam.step(targets_w, grads);
            loss_sum += loss.value()[0];
            ++n_batches;
        }
        result.epoch_train_loss.push_back(n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0);
    }
    result.steps = adam.steps();
    result.final_heldout_loss = next_token_nll(dense_logits(model), split.heldout, config.context_len).mean();
    return result;
}

}  // namespace spon
