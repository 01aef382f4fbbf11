#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tinyvlm {

/// Dense row-major tensor of 64-bit floats. Ops never mutate their inputs;
/// every forward/backward call returns fresh tensors.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape);                      // zero-filled
    Tensor(std::vector<size_t> shape, std::vector<double> data);

    static Tensor full(std::vector<size_t> shape, double value);

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t numel() const { return data_.size(); }
    size_t extent(size_t axis) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // shape-checked accessors for rank-2 / rank-3 tensors
    double& at(size_t i, size_t j);
    double at(size_t i, size_t j) const;
    double& at(size_t i, size_t j, size_t k);
    double at(size_t i, size_t j, size_t k) const;

    Tensor reshaped(std::vector<size_t> new_shape) const;
    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<size_t> shape_;
    std::vector<double> data_;
};

size_t shape_numel(const std::vector<size_t>& shape);
std::string shape_str(const std::vector<size_t>& shape);   // "[4, 4, 3]"

/// splitmix64 stream; identical sequences on every platform, so seeded
/// initialization is bitwise reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}
    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    uint64_t next_below(uint64_t n) { return next_u64() % n; }
private:
    uint64_t state_;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// "TNSR" container: magic | u32 rank | u32 extents | f64 row-major payload,
// all little-endian. Readers reject bad magic, rank > 8, zero extents and
// payload size mismatches.
void write_tnsr(const std::string& path, const Tensor& t);
Tensor read_tnsr(const std::string& path);

}  // namespace tinyvlm
