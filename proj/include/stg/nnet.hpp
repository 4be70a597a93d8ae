#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stg/linalg.hpp"
#include "stg/rng.hpp"

namespace stg {

enum class Activation { tanh, relu, linear };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

template <typename Scalar>
struct LayerT {
    MatrixX<Scalar> W;
    VectorX<Scalar> b;
    Activation act = Activation::linear;
};
using Layer = LayerT<double>;

struct HeadSpec {
    int action_dims = 0;
    int action_bins = 0;
    int steps_bins = 0;
};

// MLP trunk with two categorical heads: per-dimension action logits and
// steps-to-go logits. Inputs are assembled by features() below.
template <typename Scalar>
struct DenseNetT {
    int input_dim = 0;
    std::vector<LayerT<Scalar>> trunk;
    LayerT<Scalar> action_head;
    LayerT<Scalar> steps_head;
    HeadSpec heads;
};
using DenseNet = DenseNetT<double>;

// Same shapes as the parameters; used for gradients and optimizer moments.
struct Gradients {
    std::vector<Layer> trunk;
    Layer action_head;
    Layer steps_head;
};

struct NetConfig {
    int obs_dim = 0;
    std::vector<int> hidden = {256, 256};
    Activation act = Activation::relu;
    int action_dims = 0;
    int action_bins = 21;
    int steps_bins = 50;
};

enum class Objective { bc, stg };

// Network input: [obs, goal, goal - obs, |goal - obs|, unit(goal - obs),
// objective one-hot]. The polar terms give the net direct access to the
// direction to goal, which measurably improves rollout robustness.
int feature_dim(int obs_dim);
VectorXd features(const VectorXd& obs, const VectorXd& goal, Objective obj);

DenseNet make_net(const NetConfig& cfg, std::uint64_t seed);
Gradients zeros_like(const DenseNet& net);

// Per-layer intermediate values kept for the backward pass.
struct ForwardCache {
    MatrixXd input;
    std::vector<MatrixXd> pre;
    std::vector<MatrixXd> post;
};

// Batched trunk forward; one sample per column.
MatrixXd trunk_forward(const DenseNet& net, const MatrixXd& X, ForwardCache* cache = nullptr);
MatrixXd head_logits(const Layer& head, const MatrixXd& hidden);

enum class Head { action, steps };

// Accumulates parameter gradients given d(loss)/d(head logits) for one head.
void backward_from_head(const DenseNet& net, Head head, const ForwardCache& cache,
                        const MatrixXd& dlogits, Gradients& grads);

// Convenience single-sample forward returning the selected head's logits.
VectorXd forward(const DenseNet& net, const VectorXd& input, Head head);

// loss = -log_softmax(logits)[target]; grad = softmax(logits) - one_hot(target).
std::pair<double, VectorXd> cross_entropy(const VectorXd& logits, int target);

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

struct AdamWState {
    AdamWConfig cfg;
    Gradients m;
    Gradients v;
    long step = 0;
};

AdamWState make_adamw(const DenseNet& net, const AdamWConfig& cfg);
void adamw_step(DenseNet& net, const Gradients& grads, AdamWState& state);

// Flat views over every parameter tensor in a fixed enumeration order.
struct TensorView {
    std::string name;
    double* data;
    std::vector<int> dims;
    long size() const {
        long n = 1;
        for (int d : dims) n *= d;
        return n;
    }
};
std::vector<TensorView> tensor_views(DenseNet& net);
std::vector<TensorView> tensor_views(Gradients& g);

// FNV-1a over the row-major float32 serialization of all parameters.
std::uint64_t param_hash(const DenseNet& net);

// Casts every parameter through float32, matching checkpoint precision.
// Actors always run on such a round-tripped snapshot so that in-process and
// over-the-wire policies are bit-identical.
void round_trip_f32(DenseNet& net);

bool all_finite(const DenseNet& net);

}  // namespace stg
