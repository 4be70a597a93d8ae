#include "stg/nnet.hpp"

#include <cmath>
#include <cstring>

#include "stg/common.hpp"

namespace stg {

Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    if (s == "linear") return Activation::linear;
    throw ConfigError("unknown activation: " + s);
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::linear: return "linear";
    }
    throw ConfigError("bad activation tag");
}

int feature_dim(int obs_dim) { return 4 * obs_dim + 3; }

VectorXd features(const VectorXd& obs, const VectorXd& goal, Objective obj) {
    if (obs.size() != goal.size()) throw ConfigError("features: obs/goal dim mismatch");
    VectorXd diff = goal - obs;
    double r = diff.norm();
    VectorXd unit = r > 1e-9 ? VectorXd(diff / r) : VectorXd(VectorXd::Zero(diff.size()));
    VectorXd x(feature_dim(static_cast<int>(obs.size())));
    x << obs, goal, diff, r, unit, (obj == Objective::bc ? 1.0 : 0.0),
        (obj == Objective::stg ? 1.0 : 0.0);
    return x;
}

namespace {

Layer make_layer(int out_dim, int in_dim, Activation act, Rng& rng) {
    Layer l;
    l.W.resize(out_dim, in_dim);
    l.b = VectorXd::Zero(out_dim);
    l.act = act;
    double s = std::sqrt(6.0 / (in_dim + out_dim));
    // Row-major fill order so initialization is independent of storage layout.
    for (int r = 0; r < out_dim; ++r)
        for (int c = 0; c < in_dim; ++c) l.W(r, c) = rng.uniform(-s, s);
    return l;
}

MatrixXd apply_activation(const MatrixXd& z, Activation act) {
    switch (act) {
        case Activation::tanh: return z.array().tanh();
        case Activation::relu: return z.cwiseMax(0.0);
        case Activation::linear: return z;
    }
    throw ConfigError("bad activation tag");
}

MatrixXd activation_grad(const MatrixXd& pre, const MatrixXd& post, Activation act) {
    switch (act) {
        case Activation::tanh: return 1.0 - post.array().square();
        case Activation::relu: return (pre.array() > 0.0).cast<double>();
        case Activation::linear: return MatrixXd::Ones(pre.rows(), pre.cols());
    }
    throw ConfigError("bad activation tag");
}

}  // namespace

DenseNet make_net(const NetConfig& cfg, std::uint64_t seed) {
    if (cfg.obs_dim <= 0 || cfg.action_dims <= 0 || cfg.action_bins <= 0 || cfg.steps_bins <= 0)
        throw ConfigError("make_net: non-positive dimension in config");
    DenseNet net;
    net.input_dim = feature_dim(cfg.obs_dim);
    net.heads = {cfg.action_dims, cfg.action_bins, cfg.steps_bins};
    int in = net.input_dim;
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
        Rng r = derive_stream(seed, "init.trunk", i);
        net.trunk.push_back(make_layer(cfg.hidden[i], in, cfg.act, r));
        in = cfg.hidden[i];
    }
    {
        Rng r = derive_stream(seed, "init.action_head");
        net.action_head = make_layer(cfg.action_dims * cfg.action_bins, in, Activation::linear, r);
    }
    {
        Rng r = derive_stream(seed, "init.steps_head");
        net.steps_head = make_layer(cfg.steps_bins, in, Activation::linear, r);
    }
    return net;
}

Gradients zeros_like(const DenseNet& net) {
    Gradients g;
    for (const auto& l : net.trunk) {
        Layer z;
        z.W = MatrixXd::Zero(l.W.rows(), l.W.cols());
        z.b = VectorXd::Zero(l.b.size());
        z.act = l.act;
        g.trunk.push_back(std::move(z));
    }
    g.action_head.W = MatrixXd::Zero(net.action_head.W.rows(), net.action_head.W.cols());
    g.action_head.b = VectorXd::Zero(net.action_head.b.size());
    g.steps_head.W = MatrixXd::Zero(net.steps_head.W.rows(), net.steps_head.W.cols());
    g.steps_head.b = VectorXd::Zero(net.steps_head.b.size());
    return g;
}

MatrixXd trunk_forward(const DenseNet& net, const MatrixXd& X, ForwardCache* cache) {
    if (X.rows() != net.input_dim) throw ConfigError("trunk_forward: input dim mismatch");
    if (cache) {
        cache->input = X;
        cache->pre.clear();
        cache->post.clear();
    }
    MatrixXd h = X;
    for (const auto& l : net.trunk) {
        MatrixXd z = (l.W * h).colwise() + l.b;
        MatrixXd a = apply_activation(z, l.act);
        if (cache) {
            cache->pre.push_back(std::move(z));
            cache->post.push_back(a);
        }
        h = std::move(a);
    }
    return h;
}

MatrixXd head_logits(const Layer& head, const MatrixXd& hidden) {
    return (head.W * hidden).colwise() + head.b;
}

void backward_from_head(const DenseNet& net, Head head, const ForwardCache& cache,
                        const MatrixXd& dlogits, Gradients& grads) {
    const Layer& h = head == Head::action ? net.action_head : net.steps_head;
    Layer& gh = head == Head::action ? grads.action_head : grads.steps_head;
    const MatrixXd& trunk_out = cache.post.empty() ? cache.input : cache.post.back();
    if (dlogits.rows() != h.W.rows()) throw ConfigError("backward_from_head: logit dim mismatch");

    gh.W.noalias() += dlogits * trunk_out.transpose();
    gh.b.noalias() += dlogits.rowwise().sum();

    MatrixXd delta = h.W.transpose() * dlogits;
    for (int i = static_cast<int>(net.trunk.size()) - 1; i >= 0; --i) {
        delta.array() *= activation_grad(cache.pre[i], cache.post[i], net.trunk[i].act).array();
        const MatrixXd& below = i == 0 ? cache.input : cache.post[i - 1];
        grads.trunk[i].W.noalias() += delta * below.transpose();
        grads.trunk[i].b.noalias() += delta.rowwise().sum();
        if (i > 0) delta = net.trunk[i].W.transpose() * delta;
    }
}

VectorXd forward(const DenseNet& net, const VectorXd& input, Head head) {
    MatrixXd h = trunk_forward(net, input);
    return head_logits(head == Head::action ? net.action_head : net.steps_head, h).col(0);
}

std::pair<double, VectorXd> cross_entropy(const VectorXd& logits, int target) {
    if (target < 0 || target >= logits.size()) throw ConfigError("cross_entropy: target out of range");
    VectorXd ls = log_softmax(logits);
    VectorXd grad = ls.array().exp();
    grad(target) -= 1.0;
    return {-ls(target), grad};
}

AdamWState make_adamw(const DenseNet& net, const AdamWConfig& cfg) {
    AdamWState st;
    st.cfg = cfg;
    st.m = zeros_like(net);
    st.v = zeros_like(net);
    return st;
}

void adamw_step(DenseNet& net, const Gradients& grads, AdamWState& state) {
    const AdamWConfig& c = state.cfg;
    state.step += 1;
    double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

    auto pv = tensor_views(net);
    Gradients& gmut = const_cast<Gradients&>(grads);
    auto gv = tensor_views(gmut);
    auto mv = tensor_views(state.m);
    auto vv = tensor_views(state.v);
    for (std::size_t i = 0; i < pv.size(); ++i) {
        long n = pv[i].size();
        Eigen::Map<MatrixXd> p(pv[i].data, n, 1);
        Eigen::Map<const MatrixXd> g(gv[i].data, n, 1);
        Eigen::Map<MatrixXd> m(mv[i].data, n, 1);
        Eigen::Map<MatrixXd> v(vv[i].data, n, 1);
        MatrixXd mnew = c.beta1 * m + (1.0 - c.beta1) * g;
        MatrixXd vnew = c.beta2 * v + (1.0 - c.beta2) * g.array().square().matrix();
        m = mnew;
        v = vnew;
        MatrixXd mhat = mnew / bc1;
        MatrixXd vhat = vnew / bc2;
        p.array() -= c.lr * c.weight_decay * p.array();
        p.array() -= c.lr * mhat.array() / (vhat.array().sqrt() + c.eps);
    }
}

namespace {

void push_views(std::vector<TensorView>& out, const std::string& prefix, Layer& l) {
    out.push_back({prefix + ".W", l.W.data(),
                   {static_cast<int>(l.W.rows()), static_cast<int>(l.W.cols())}});
    out.push_back({prefix + ".b", l.b.data(), {static_cast<int>(l.b.size())}});
}

}  // namespace

std::vector<TensorView> tensor_views(DenseNet& net) {
    std::vector<TensorView> out;
    for (std::size_t i = 0; i < net.trunk.size(); ++i)
        push_views(out, "trunk." + std::to_string(i), net.trunk[i]);
    push_views(out, "action_head", net.action_head);
    push_views(out, "steps_head", net.steps_head);
    return out;
}

std::vector<TensorView> tensor_views(Gradients& g) {
    std::vector<TensorView> out;
    for (std::size_t i = 0; i < g.trunk.size(); ++i)
        push_views(out, "trunk." + std::to_string(i), g.trunk[i]);
    push_views(out, "action_head", g.action_head);
    push_views(out, "steps_head", g.steps_head);
    return out;
}

std::uint64_t param_hash(const DenseNet& net) {
    std::uint64_t h = 1469598103934665603ull;
    auto views = tensor_views(const_cast<DenseNet&>(net));
    for (const auto& tv : views) {
        h = fnv1a64(tv.name.data(), tv.name.size(), h);
        // Hash in row-major order at float32 precision to match the
        // checkpoint serialization exactly.
        if (tv.dims.size() == 2) {
            Eigen::Map<const MatrixXd> m(tv.data, tv.dims[0], tv.dims[1]);
            for (int r = 0; r < tv.dims[0]; ++r)
                for (int c = 0; c < tv.dims[1]; ++c) {
                    float f = static_cast<float>(m(r, c));
                    h = fnv1a64(&f, sizeof(f), h);
                }
        } else {
            for (long i = 0; i < tv.size(); ++i) {
                float f = static_cast<float>(tv.data[i]);
                h = fnv1a64(&f, sizeof(f), h);
            }
        }
    }
    return h;
}

void round_trip_f32(DenseNet& net) {
    for (auto& tv : tensor_views(net))
        for (long i = 0; i < tv.size(); ++i)
            tv.data[i] = static_cast<double>(static_cast<float>(tv.data[i]));
}

bool all_finite(const DenseNet& net) {
    auto views = tensor_views(const_cast<DenseNet&>(net));
    for (const auto& tv : views)
        for (long i = 0; i < tv.size(); ++i)
            if (!std::isfinite(tv.data[i])) return false;
    return true;
}

}  // namespace stg
