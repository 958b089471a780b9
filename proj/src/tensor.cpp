#include "dtlsd/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dtlsd {

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::string Tensor::shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void mm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
           std::size_t m, bool acc) {
    if (!acc) {
        for (std::size_t i = 0; i < n * m; ++i) c[i] = 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

void mm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
           std::size_t m, bool acc) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = acc ? crow[j] + s : s;
        }
    }
}

void mm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
           std::size_t m, bool acc) {
    if (!acc) {
        for (std::size_t i = 0; i < n * m; ++i) c[i] = 0.0;
    }
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * n;
        const double* brow = b + p * m;
        for (std::size_t i = 0; i < n; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw std::invalid_argument("softmax: axis out of range");
    }
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];

    Tensor out(shape);
    const double* in = x.data();
    double* o = out.data();
    for (std::size_t u = 0; u < outer; ++u) {
        for (std::size_t v = 0; v < inner; ++v) {
            const std::size_t base = u * len * inner + v;
            double mx = in[base];
            for (std::size_t t = 1; t < len; ++t) {
                mx = std::max(mx, in[base + t * inner]);
            }
            double sum = 0.0;
            for (std::size_t t = 0; t < len; ++t) {
                const double e = std::exp(in[base + t * inner] - mx);
                o[base + t * inner] = e;
                sum += e;
            }
            const double norm = 1.0 / sum;
            for (std::size_t t = 0; t < len; ++t) o[base + t * inner] *= norm;
        }
    }
    return out;
}

}  // namespace dtlsd
