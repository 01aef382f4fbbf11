#include "tinyvlm/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "TNSR i/o assumes a little-endian host");

namespace tinyvlm {

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

static void check_extents(const std::vector<size_t>& shape) {
    for (size_t e : shape) {
        if (e == 0) {
            throw std::invalid_argument("tensor shape " + shape_str(shape) +
                                        " has a zero extent");
        }
    }
}

Tensor::Tensor(std::vector<size_t> shape) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::full(std::vector<size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
}

size_t Tensor::extent(size_t axis) const {
    if (axis >= shape_.size()) {
        throw std::invalid_argument("axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
}

static void check_rank(const std::vector<size_t>& shape, size_t want) {
    if (shape.size() != want) {
        throw std::invalid_argument("expected rank-" + std::to_string(want) +
                                    " tensor, got shape " + shape_str(shape));
    }
}

double& Tensor::at(size_t i, size_t j) {
    check_rank(shape_, 2);
    return data_[i * shape_[1] + j];
}

double Tensor::at(size_t i, size_t j) const {
    check_rank(shape_, 2);
    return data_[i * shape_[1] + j];
}

double& Tensor::at(size_t i, size_t j, size_t k) {
    check_rank(shape_, 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
}

double Tensor::at(size_t i, size_t j, size_t k) const {
    check_rank(shape_, 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::reshaped(std::vector<size_t> new_shape) const {
    check_extents(new_shape);
    if (shape_numel(new_shape) != data_.size()) {
        throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " +
                                    shape_str(new_shape) + ": element counts differ");
    }
    return Tensor(std::move(new_shape), data_);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

static constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
static constexpr size_t kMaxRank = 8;

void write_tnsr(const std::string& path, const Tensor& t) {
    if (t.rank() > kMaxRank) {
        throw std::invalid_argument("tensor rank " + std::to_string(t.rank()) +
                                    " exceeds the TNSR limit of 8");
    }
    for (size_t e : t.shape()) {
        if (e > std::numeric_limits<uint32_t>::max()) {
            throw std::invalid_argument("extent too large for TNSR: " + shape_str(t.shape()));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(kMagic, 4);
    uint32_t rank = static_cast<uint32_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (size_t e : t.shape()) {
        uint32_t e32 = static_cast<uint32_t>(e);
        f.write(reinterpret_cast<const char*>(&e32), 4);
    }
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw IoError("short write to " + path);
}

Tensor read_tnsr(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    if (!f.read(magic, 4)) throw IoError(path + ": truncated TNSR header");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError(path + ": bad magic, not a TNSR file");
    }
    uint32_t rank = 0;
    if (!f.read(reinterpret_cast<char*>(&rank), 4)) {
        throw IoError(path + ": truncated TNSR header");
    }
    if (rank > kMaxRank) {
        throw IoError(path + ": rank " + std::to_string(rank) + " exceeds the limit of 8");
    }
    std::vector<size_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t e = 0;
        if (!f.read(reinterpret_cast<char*>(&e), 4)) {
            throw IoError(path + ": truncated TNSR header");
        }
        if (e == 0) throw IoError(path + ": zero extent in TNSR shape");
        shape[i] = e;
    }
    size_t n = shape_numel(shape);
    std::vector<double> data(n);
    f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (static_cast<size_t>(f.gcount()) != n * sizeof(double)) {
        throw IoError(path + ": payload shorter than shape " + shape_str(shape) + " requires");
    }
    f.peek();
    if (!f.eof()) throw IoError(path + ": payload longer than shape " + shape_str(shape) + " requires");
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace tinyvlm
