#include "mmfl/nnkit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmfl::nnkit {

namespace {

constexpr double kProbFloor = 1e-12;

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

bool all_finite(const Vec& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::size_t DenseNet::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.data.size() + l.bias.size();
    return n;
}

Vec DenseNet::to_flat() const {
    Vec flat;
    flat.reserve(param_count());
    for (const auto& l : layers) {
        flat.insert(flat.end(), l.weight.data.begin(), l.weight.data.end());
        flat.insert(flat.end(), l.bias.begin(), l.bias.end());
    }
    return flat;
}

void DenseNet::from_flat(const Vec& flat) { from_flat_span(flat.data(), flat.size()); }

void DenseNet::from_flat_span(const double* flat, std::size_t n) {
    require(n == param_count(), "flat parameter vector length mismatch");
    std::size_t pos = 0;
    for (auto& l : layers) {
        std::copy(flat + pos, flat + pos + l.weight.data.size(), l.weight.data.begin());
        pos += l.weight.data.size();
        std::copy(flat + pos, flat + pos + l.bias.size(), l.bias.begin());
        pos += l.bias.size();
    }
}

DenseNet make_dense_net(const std::vector<std::size_t>& dims,
                        const std::vector<Activation>& acts, Rng& rng) {
    require(dims.size() >= 2, "need at least input and output dim");
    require(acts.size() == dims.size() - 1, "one activation per layer required");
    DenseNet net;
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
        Layer l;
        l.weight = Matrix(dims[k + 1], dims[k]);
        l.bias.assign(dims[k + 1], 0.0);
        l.act = acts[k];
        const double bound = std::sqrt(6.0 / static_cast<double>(dims[k] + dims[k + 1]));
        for (auto& w : l.weight.data) w = rng.uniform(-bound, bound);
        net.layers.push_back(std::move(l));
    }
    return net;
}

Vec AudioModel::to_flat() const {
    Vec flat = encoder.to_flat();
    const Vec h = head.to_flat();
    flat.insert(flat.end(), h.begin(), h.end());
    return flat;
}

void AudioModel::from_flat(const Vec& flat) {
    require(flat.size() == param_count(), "flat parameter vector length mismatch");
    encoder.from_flat_span(flat.data(), encoder.param_count());
    head.from_flat_span(flat.data() + encoder.param_count(), head.param_count());
}

Vec MultimodalModel::to_flat() const {
    Vec flat = audio_encoder.to_flat();
    const Vec v = visual_encoder.to_flat();
    const Vec f = fusion_head.to_flat();
    flat.insert(flat.end(), v.begin(), v.end());
    flat.insert(flat.end(), f.begin(), f.end());
    return flat;
}

void MultimodalModel::from_flat(const Vec& flat) {
    require(flat.size() == param_count(), "flat parameter vector length mismatch");
    std::size_t pos = 0;
    audio_encoder.from_flat_span(flat.data() + pos, audio_encoder.param_count());
    pos += audio_encoder.param_count();
    visual_encoder.from_flat_span(flat.data() + pos, visual_encoder.param_count());
    pos += visual_encoder.param_count();
    fusion_head.from_flat_span(flat.data() + pos, fusion_head.param_count());
}

Vec softmax(const Vec& logits) {
    require(!logits.empty(), "softmax on empty vector");
    require(all_finite(logits), "softmax on non-finite input");
    const double m = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

Vec temper(const Vec& p, double temperature) {
    require(temperature > 0.0, "temperature must be positive");
    if (temperature == 1.0) return p;
    Vec out(p.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        out[i] = std::pow(std::max(p[i], kProbFloor), 1.0 / temperature);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

double kl_div(const Vec& p, const Vec& q) {
    require(p.size() == q.size(), "kl_div length mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;  // 0 * log 0 = 0
        kl += p[i] * std::log(p[i] / std::max(q[i], kProbFloor));
    }
    return kl;
}

double cross_entropy(const Vec& probs, std::size_t label) {
    require(label < probs.size(), "label out of range");
    return -std::log(std::max(probs[label], kProbFloor));
}

Vec net_forward(const DenseNet& net, const Vec& x, ForwardCache* cache) {
    require(x.size() == net.input_dim(), "input dimension mismatch");
    if (cache) {
        cache->inputs.clear();
        cache->preacts.clear();
    }
    Vec cur = x;
    for (const auto& l : net.layers) {
        if (cache) cache->inputs.push_back(cur);
        Vec pre(l.weight.rows);
        for (std::size_t r = 0; r < l.weight.rows; ++r) {
            double acc = l.bias[r];
            const double* wrow = l.weight.data.data() + r * l.weight.cols;
            for (std::size_t c = 0; c < l.weight.cols; ++c) acc += wrow[c] * cur[c];
            pre[r] = acc;
        }
        if (cache) cache->preacts.push_back(pre);
        if (l.act == Activation::Relu) {
            for (auto& v : pre) v = v > 0.0 ? v : 0.0;
        }
        cur = std::move(pre);
    }
    if (cache) cache->output = cur;
    return cur;
}

AudioCache forward_audio(const AudioModel& model, const Vec& x_audio) {
    AudioCache cache;
    const Vec emb = net_forward(model.encoder, x_audio, &cache.encoder);
    cache.logits = net_forward(model.head, emb, &cache.head);
    return cache;
}

MultimodalCache forward_multimodal(const MultimodalModel& model, const Vec& x_audio,
                                   const Vec& x_visual) {
    MultimodalCache cache;
    const Vec ea = net_forward(model.audio_encoder, x_audio, &cache.audio_encoder);
    const Vec ev = net_forward(model.visual_encoder, x_visual, &cache.visual_encoder);
    Vec fused;
    fused.reserve(ea.size() + ev.size());
    fused.insert(fused.end(), ea.begin(), ea.end());
    fused.insert(fused.end(), ev.begin(), ev.end());
    cache.logits = net_forward(model.fusion_head, fused, &cache.fusion_head);
    return cache;
}

Vec net_backward(const DenseNet& net, const ForwardCache& cache, const Vec& dout,
                 double* grad_flat) {
    Vec d = dout;
    std::size_t offset = net.param_count();
    for (std::size_t k = net.layers.size(); k-- > 0;) {
        const Layer& l = net.layers[k];
        const Vec& in = cache.inputs[k];
        const Vec& pre = cache.preacts[k];
        if (l.act == Activation::Relu) {
            for (std::size_t r = 0; r < d.size(); ++r) {
                if (pre[r] <= 0.0) d[r] = 0.0;
            }
        }
        offset -= l.weight.data.size() + l.bias.size();
        double* gw = grad_flat + offset;
        double* gb = gw + l.weight.data.size();
        Vec din(l.weight.cols, 0.0);
        for (std::size_t r = 0; r < l.weight.rows; ++r) {
            gb[r] += d[r];
            const double* wrow = l.weight.data.data() + r * l.weight.cols;
            double* gwrow = gw + r * l.weight.cols;
            for (std::size_t c = 0; c < l.weight.cols; ++c) {
                gwrow[c] += d[r] * in[c];
                din[c] += d[r] * wrow[c];
            }
        }
        d = std::move(din);
    }
    return d;
}

namespace {

// dCE/dlogits for probs = softmax(logits): probs - onehot(label).
Vec ce_logit_grad(const Vec& probs, std::size_t label) {
    Vec d = probs;
    d[label] -= 1.0;
    return d;
}

void backprop_audio(const AudioModel& model, const AudioCache& cache, const Vec& dlogits,
                    Vec& grad) {
    const Vec demb =
        net_backward(model.head, cache.head, dlogits, grad.data() + model.encoder.param_count());
    net_backward(model.encoder, cache.encoder, demb, grad.data());
}

}  // namespace

GradResult grad_ce(const AudioModel& model, const AudioBatch& batch) {
    require(!batch.inputs.empty(), "empty batch");
    require(batch.inputs.size() == batch.labels.size(), "inputs/labels length mismatch");
    GradResult res;
    res.grad.assign(model.param_count(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.inputs.size());
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        const AudioCache cache = forward_audio(model, batch.inputs[i]);
        const Vec probs = softmax(cache.logits);
        res.loss += cross_entropy(probs, batch.labels[i]) * inv_n;
        Vec d = ce_logit_grad(probs, batch.labels[i]);
        for (auto& v : d) v *= inv_n;
        backprop_audio(model, cache, d, res.grad);
    }
    return res;
}

GradResult grad_ce(const MultimodalModel& model, const MultimodalBatch& batch) {
    require(!batch.audio.empty(), "empty batch");
    require(batch.audio.size() == batch.labels.size() && batch.visual.size() == batch.labels.size(),
            "inputs/labels length mismatch");
    GradResult res;
    res.grad.assign(model.param_count(), 0.0);
    const std::size_t na = model.audio_encoder.param_count();
    const std::size_t nv = model.visual_encoder.param_count();
    const std::size_t embed = model.audio_encoder.output_dim();
    const double inv_n = 1.0 / static_cast<double>(batch.audio.size());
    for (std::size_t i = 0; i < batch.audio.size(); ++i) {
        const MultimodalCache cache = forward_multimodal(model, batch.audio[i], batch.visual[i]);
        const Vec probs = softmax(cache.logits);
        res.loss += cross_entropy(probs, batch.labels[i]) * inv_n;
        Vec d = ce_logit_grad(probs, batch.labels[i]);
        for (auto& v : d) v *= inv_n;
        const Vec dfused =
            net_backward(model.fusion_head, cache.fusion_head, d, res.grad.data() + na + nv);
        const Vec da(dfused.begin(), dfused.begin() + embed);
        const Vec dv(dfused.begin() + embed, dfused.end());
        net_backward(model.audio_encoder, cache.audio_encoder, da, res.grad.data());
        net_backward(model.visual_encoder, cache.visual_encoder, dv, res.grad.data() + na);
    }
    return res;
}

GradResult grad_distill(const AudioModel& student, const std::vector<Vec>& teacher_probs,
                        const AudioBatch& batch, double temperature, double kl_weight) {
    require(!batch.inputs.empty(), "empty batch");
    require(teacher_probs.size() == batch.inputs.size(),
            "teacher_probs/batch length mismatch");
    require(temperature > 0.0, "temperature must be positive");
    GradResult res;
    res.grad.assign(student.param_count(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.inputs.size());
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) {
        const AudioCache cache = forward_audio(student, batch.inputs[i]);
        const Vec probs = softmax(cache.logits);
        Vec d = ce_logit_grad(probs, batch.labels[i]);
        double loss = cross_entropy(probs, batch.labels[i]);
        if (kl_weight != 0.0) {
            const Vec a = temper(probs, temperature);
            const Vec b = temper(teacher_probs[i], temperature);
            const double kl = kl_div(a, b);
            loss += kl_weight * kl;
            // For a = softmax((z - logsumexp z)/T), dKL/dz_k = a_k*(log(a_k/b_k) - KL)/T.
            for (std::size_t k = 0; k < d.size(); ++k) {
                const double c =
                    a[k] * (std::log(std::max(a[k], kProbFloor) / std::max(b[k], kProbFloor)) - kl);
                d[k] += kl_weight * c / temperature;
            }
        }
        res.loss += loss * inv_n;
        for (auto& v : d) v *= inv_n;
        backprop_audio(student, cache, d, res.grad);
    }
    return res;
}

void sgd_step(Vec& params, const Vec& grad, double lr) {
    require(params.size() == grad.size(), "params/grad length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

}  // namespace mmfl::nnkit
