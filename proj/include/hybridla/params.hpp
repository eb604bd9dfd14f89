#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hybridla/tensor.hpp"

namespace hybridla {

// A named trainable tensor. Names are slash-free dotted paths
// ("decoder.layer2.attn.wq") and stay stable across save/load.
struct Parameter {
    std::string name;
    Tensor tensor;
};

// Owns every trainable tensor of one model. Registration order is the
// canonical iteration order everywhere (optimizer, EMA, checkpoints), which
// keeps training bit-deterministic.
class ParameterStore {
public:
    // Creates a requires_grad tensor initialized uniformly in [-bound, bound].
    // The draw stream is derived from (seed, name), so adding parameters never
    // shifts the initialization of existing ones.
    Tensor create(const std::string& name, const Shape& shape, double bound);
    // Creates a zero-initialized parameter (norm biases, residual head tails).
    Tensor create_zeros(const std::string& name, const Shape& shape);
    // Creates a constant-filled parameter (layer-norm gains).
    Tensor create_full(const std::string& name, const Shape& shape, double value);

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Tensor get(const std::string& name) const;

    const std::vector<Parameter>& all() const { return params_; }
    size_t count() const { return params_.size(); }
    size_t scalar_count() const;

    void zero_grads();
    void set_seed(uint64_t seed) { seed_ = seed; }
    uint64_t seed() const { return seed_; }

private:
    Tensor insert(const std::string& name, Tensor t);

    std::vector<Parameter> params_;
    std::map<std::string, size_t> index_;
    uint64_t seed_ = 0;
};

// Uniform fan-in/fan-out bound used for linear layers: sqrt(6 / (fin + fout)).
double xavier_bound(int fan_in, int fan_out);

}  // namespace hybridla
