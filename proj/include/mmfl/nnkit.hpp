#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mmfl/rng.hpp"

namespace mmfl::nnkit {

using Vec = std::vector<double>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;  // row-major, size rows*cols

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

enum class Activation { Relu, Identity };

struct Layer {
    Matrix weight;  // out_dim x in_dim
    Vec bias;       // out_dim
    Activation act = Activation::Identity;
};

// Plain dense stack. Flat parameter layout: per layer, weight row-major then
// bias, layers in forward order.
struct DenseNet {
    std::vector<Layer> layers;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols; }
    std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows; }
    std::size_t param_count() const;

    Vec to_flat() const;
    void from_flat(const Vec& flat);
    void from_flat_span(const double* flat, std::size_t n);
};

// Xavier-uniform weights, zero biases.
DenseNet make_dense_net(const std::vector<std::size_t>& dims,
                        const std::vector<Activation>& acts, Rng& rng);

struct AudioModel {
    DenseNet encoder;  // audio_dim -> embed_dim
    DenseNet head;     // embed_dim -> num_classes, identity output

    std::size_t param_count() const { return encoder.param_count() + head.param_count(); }
    Vec to_flat() const;
    void from_flat(const Vec& flat);
};

struct MultimodalModel {
    DenseNet audio_encoder;   // audio_dim -> embed_dim
    DenseNet visual_encoder;  // visual_dim -> embed_dim
    DenseNet fusion_head;     // 2*embed_dim -> num_classes

    std::size_t param_count() const {
        return audio_encoder.param_count() + visual_encoder.param_count() +
               fusion_head.param_count();
    }
    Vec to_flat() const;
    void from_flat(const Vec& flat);
};

// Per-layer activations kept for exact backprop.
struct ForwardCache {
    std::vector<Vec> inputs;   // input to each layer
    std::vector<Vec> preacts;  // pre-activation of each layer
    Vec output;
};

struct AudioCache {
    ForwardCache encoder;
    ForwardCache head;
    Vec logits;
};

struct MultimodalCache {
    ForwardCache audio_encoder;
    ForwardCache visual_encoder;
    ForwardCache fusion_head;
    Vec logits;
};

Vec softmax(const Vec& logits);
Vec temper(const Vec& p, double temperature);
double kl_div(const Vec& p, const Vec& q);
double cross_entropy(const Vec& probs, std::size_t label);

Vec net_forward(const DenseNet& net, const Vec& x, ForwardCache* cache = nullptr);

AudioCache forward_audio(const AudioModel& model, const Vec& x_audio);
MultimodalCache forward_multimodal(const MultimodalModel& model, const Vec& x_audio,
                                   const Vec& x_visual);

// Backprop through one net. dout is the gradient at the net output;
// gradients are accumulated into grad_flat (layout = to_flat order) and the
// gradient at the net input is returned.
Vec net_backward(const DenseNet& net, const ForwardCache& cache, const Vec& dout,
                 double* grad_flat);

struct AudioBatch {
    std::vector<Vec> inputs;
    std::vector<std::size_t> labels;
};

struct MultimodalBatch {
    std::vector<Vec> audio;
    std::vector<Vec> visual;
    std::vector<std::size_t> labels;
};

struct GradResult {
    double loss = 0.0;
    Vec grad;  // flat, matching the model's to_flat layout
};

// Mean cross-entropy gradient over the batch.
GradResult grad_ce(const AudioModel& model, const AudioBatch& batch);
GradResult grad_ce(const MultimodalModel& model, const MultimodalBatch& batch);

// Gradient of mean [CE(student, y) + kl_weight * KL(temper(p_student, T) ||
// temper(p_teacher, T))] with respect to the student only. teacher_probs has
// one softmax vector per batch sample.
GradResult grad_distill(const AudioModel& student, const std::vector<Vec>& teacher_probs,
                        const AudioBatch& batch, double temperature, double kl_weight);

void sgd_step(Vec& params, const Vec& grad, double lr);

}  // namespace mmfl::nnkit
