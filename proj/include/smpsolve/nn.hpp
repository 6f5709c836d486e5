// Feed-forward networks: affine layers with batch normalization on every
// hidden pre-activation followed by ReLU, plus the Adam optimizer used to
// train them. Networks are staged onto a Tape once per iteration and may be
// evaluated at many time points; gradient fan-in across calls is handled by
// the tape.
#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smpsolve/autodiff.hpp"
#include "smpsolve/rng.hpp"

namespace smp {

enum class NetMode { kTrain, kEval };

struct Dense {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out
};

struct BatchNorm {
    Tensor gamma, beta;                  // 1 x width
    Tensor running_mean, running_var;    // 1 x width
    double eps = 1e-6;
    double momentum = 0.9;
};

// Parameter leaf ids for one tape; `bindings` pairs each staged leaf with
// the parameter tensor it was staged from, in a fixed order.
struct StagedMlp {
    std::vector<NodeId> weights, biases, gammas, betas;
    std::vector<std::pair<NodeId, Tensor*>> bindings;
};

class Mlp {
  public:
    Mlp() = default;

    static Mlp create(std::vector<int> widths, std::uint64_t seed, bool batchnorm = true) {
        if (widths.size() < 2) throw TapeError("Mlp: need at least input and output widths");
        for (int w : widths)
            if (w < 1) throw TapeError("Mlp: widths must be positive");
        Mlp net;
        net.widths_ = std::move(widths);
        net.batchnorm_ = batchnorm;
        const rng::Stream init(seed);
        for (std::size_t l = 0; l + 1 < net.widths_.size(); ++l) {
            const int fan_in = net.widths_[l];
            const int fan_out = net.widths_[l + 1];
            Dense d;
            d.weight = Tensor(fan_in, fan_out);
            const double std_dev = std::sqrt(1.0 / fan_in);
            const rng::Stream ws = init.child(l);
            for (std::size_t i = 0; i < d.weight.numel(); ++i)
                d.weight.v[i] = std_dev * ws.normal(i);
            d.bias = Tensor(1, fan_out);
            net.layers_.push_back(std::move(d));
        }
        for (std::size_t l = 0; l + 2 < net.widths_.size(); ++l) {
            BatchNorm bn;
            const int w = net.widths_[l + 1];
            bn.gamma = Tensor::full(1, w, 1.0);
            bn.beta = Tensor(1, w);
            bn.running_mean = Tensor(1, w);
            bn.running_var = Tensor::full(1, w, 1.0);
            net.norms_.push_back(std::move(bn));
        }
        return net;
    }

    const std::vector<int>& widths() const { return widths_; }
    int input_width() const { return widths_.front(); }
    int output_width() const { return widths_.back(); }
    bool batchnorm() const { return batchnorm_; }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (Dense& d : layers_) {
            ps.push_back(&d.weight);
            ps.push_back(&d.bias);
        }
        if (batchnorm_)
            for (BatchNorm& bn : norms_) {
                ps.push_back(&bn.gamma);
                ps.push_back(&bn.beta);
            }
        return ps;
    }

    StagedMlp stage(Tape& tape) {
        StagedMlp s;
        for (Dense& d : layers_) {
            const NodeId w = tape.leaf(d.weight, true);
            const NodeId b = tape.leaf(d.bias, true);
            s.weights.push_back(w);
            s.biases.push_back(b);
            s.bindings.emplace_back(w, &d.weight);
            s.bindings.emplace_back(b, &d.bias);
        }
        if (batchnorm_)
            for (BatchNorm& bn : norms_) {
                const NodeId g = tape.leaf(bn.gamma, true);
                const NodeId be = tape.leaf(bn.beta, true);
                s.gammas.push_back(g);
                s.betas.push_back(be);
                s.bindings.emplace_back(g, &bn.gamma);
                s.bindings.emplace_back(be, &bn.beta);
            }
        return s;
    }

    // Runs the staged network on x (batch x input_width). In train mode the
    // hidden pre-activations are normalized with batch statistics and the
    // running statistics are updated; eval mode uses the stored running
    // statistics and never mutates the network.
    NodeId forward(Tape& tape, const StagedMlp& staged, NodeId x, NetMode mode,
                   std::vector<NodeId>* normalized_preacts = nullptr) {
        const Tensor& X = tape.val(x);
        if (X.cols != input_width()) throw TapeError("Mlp::forward: input width mismatch");
        if (mode == NetMode::kTrain && X.rows < 2)
            throw TapeError("Mlp::forward: train mode needs a batch of at least 2");
        NodeId h = x;
        const std::size_t n_layers = layers_.size();
        for (std::size_t l = 0; l < n_layers; ++l) {
            NodeId pre = tape.add_row(tape.matmul(h, staged.weights[l]), staged.biases[l]);
            const bool hidden = l + 1 < n_layers;
            if (!hidden) return pre;
            if (batchnorm_) {
                BatchNorm& bn = norms_[l];
                NodeId xn;
                if (mode == NetMode::kTrain) {
                    const NodeId mu = tape.mean_rows(pre);
                    const NodeId centered = tape.sub_row(pre, mu);
                    const NodeId var = tape.mean_rows(tape.mul(centered, centered));
                    const NodeId inv_std = tape.pow(tape.add_scalar(var, bn.eps), -0.5);
                    xn = tape.mul_row(centered, inv_std);
                    update_running(bn, tape.val(mu), tape.val(var));
                } else {
                    Tensor scale(1, tape.val(pre).cols);
                    Tensor shift(1, scale.cols);
                    for (int j = 0; j < scale.cols; ++j) {
                        const double is = 1.0 / std::sqrt(bn.running_var.at(0, j) + bn.eps);
                        scale.at(0, j) = is;
                        shift.at(0, j) = -bn.running_mean.at(0, j) * is;
                    }
                    xn = tape.add_row(tape.mul_row(pre, tape.constant(scale)),
                                      tape.constant(shift));
                }
                if (normalized_preacts) normalized_preacts->push_back(xn);
                pre = tape.add_row(tape.mul_row(xn, staged.gammas[l]), staged.betas[l]);
            }
            h = tape.relu(pre);
        }
        return h;  // unreachable: loop returns at the output layer
    }

    // --- checkpoint io (documented in the README) ---------------------------
    void save(std::ostream& os) const {
        os << "smpsolve-net 1\n";
        os << "widths";
        for (int w : widths_) os << ' ' << w;
        os << "\nbatchnorm " << (batchnorm_ ? 1 : 0) << '\n';
        os << std::setprecision(17);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            dump(os, "weight" + std::to_string(l), layers_[l].weight);
            dump(os, "bias" + std::to_string(l), layers_[l].bias);
        }
        for (std::size_t l = 0; l < norms_.size(); ++l) {
            dump(os, "gamma" + std::to_string(l), norms_[l].gamma);
            dump(os, "beta" + std::to_string(l), norms_[l].beta);
            dump(os, "running_mean" + std::to_string(l), norms_[l].running_mean);
            dump(os, "running_var" + std::to_string(l), norms_[l].running_var);
        }
    }
    void save_file(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw TapeError("Mlp::save_file: cannot open " + path);
        save(os);
    }

    static Mlp load(std::istream& is) {
        std::string magic;
        int version = 0;
        is >> magic >> version;
        if (magic != "smpsolve-net" || version != 1)
            throw TapeError("Mlp::load: unrecognized checkpoint header");
        std::string line;
        std::getline(is, line);
        std::getline(is, line);
        std::istringstream widths_line(line);
        std::string tag;
        widths_line >> tag;
        std::vector<int> widths;
        for (int w; widths_line >> w;) widths.push_back(w);
        int bn = 1;
        is >> tag >> bn;
        Mlp net = create(widths, 0, bn != 0);
        for (std::size_t l = 0; l < net.layers_.size(); ++l) {
            slurp(is, net.layers_[l].weight);
            slurp(is, net.layers_[l].bias);
        }
        for (std::size_t l = 0; l < net.norms_.size(); ++l) {
            slurp(is, net.norms_[l].gamma);
            slurp(is, net.norms_[l].beta);
            slurp(is, net.norms_[l].running_mean);
            slurp(is, net.norms_[l].running_var);
        }
        return net;
    }
    static Mlp load_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw TapeError("Mlp::load_file: cannot open " + path);
        return load(is);
    }

  private:
    std::vector<int> widths_;
    std::vector<Dense> layers_;
    std::vector<BatchNorm> norms_;
    bool batchnorm_ = true;

    static void update_running(BatchNorm& bn, const Tensor& mu, const Tensor& var) {
        for (int j = 0; j < mu.cols; ++j) {
            bn.running_mean.at(0, j) =
                bn.momentum * bn.running_mean.at(0, j) + (1.0 - bn.momentum) * mu.at(0, j);
            bn.running_var.at(0, j) =
                bn.momentum * bn.running_var.at(0, j) + (1.0 - bn.momentum) * var.at(0, j);
        }
    }

    static void dump(std::ostream& os, const std::string& name, const Tensor& t) {
        os << "tensor " << name << ' ' << t.rows << ' ' << t.cols << '\n';
        for (std::size_t i = 0; i < t.numel(); ++i)
            os << t.v[i] << (i + 1 == t.numel() ? '\n' : ' ');
    }
    static void slurp(std::istream& is, Tensor& t) {
        std::string tag, name;
        int rows = 0, cols = 0;
        is >> tag >> name >> rows >> cols;
        if (tag != "tensor" || rows != t.rows || cols != t.cols)
            throw TapeError("Mlp::load: checkpoint tensor shape mismatch at " + name);
        for (double& x : t.v) is >> x;
        if (!is) throw TapeError("Mlp::load: truncated checkpoint");
    }
};

// --- Adam ------------------------------------------------------------------
struct AdamState {
    std::vector<Tensor> m, v;
    long step_count = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    static AdamState like(const std::vector<Tensor*>& params) {
        AdamState s;
        for (const Tensor* p : params) {
            s.m.emplace_back(p->rows, p->cols);
            s.v.emplace_back(p->rows, p->cols);
        }
        return s;
    }
};

inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw TapeError("adam_step: parameter/gradient/state count mismatch");
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        if (!p.same_shape(g)) throw TapeError("adam_step: gradient shape mismatch");
        if (!g.all_finite()) throw TapeError("adam_step: non-finite gradient");
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m.v[i] = state.beta1 * m.v[i] + (1.0 - state.beta1) * g.v[i];
            v.v[i] = state.beta2 * v.v[i] + (1.0 - state.beta2) * g.v[i] * g.v[i];
            const double mhat = m.v[i] / bc1;
            const double vhat = v.v[i] / bc2;
            p.v[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace smp
