#include "uld/nn.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

namespace uld::nn {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

int ParamStore::declare(const std::string& name, long rows, long cols) {
    require(!finalized_, "ParamStore: cannot declare blocks after finalize()");
    Block b;
    b.name = name;
    b.offset = total_;
    b.rows = rows;
    b.cols = cols;
    total_ += b.size();
    blocks_.push_back(b);
    return static_cast<int>(blocks_.size()) - 1;
}

void ParamStore::finalize() {
    require(!finalized_, "ParamStore: finalize() called twice");
    value_ = Vec::Zero(total_);
    grad_ = Vec::Zero(total_);
    finalized_ = true;
}

Eigen::Map<Mat> ParamStore::value(int block) {
    const Block& b = blocks_.at(block);
    return Eigen::Map<Mat>(value_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<const Mat> ParamStore::value(int block) const {
    const Block& b = blocks_.at(block);
    return Eigen::Map<const Mat>(value_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<Mat> ParamStore::grad(int block) {
    const Block& b = blocks_.at(block);
    return Eigen::Map<Mat>(grad_.data() + b.offset, b.rows, b.cols);
}

std::uint64_t ParamStore::checksum() const {
    return fnv1a(value_.data(), sizeof(double) * static_cast<std::size_t>(value_.size()));
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int in_ch, int out_ch, int ksize,
                      int stride) {
    require(ksize == 1 || ksize == 3, "Conv2d: supported kernel sizes are 1 and 3");
    require(stride >= 1, "Conv2d: stride must be >= 1");
    Conv2d c;
    c.store = &store;
    c.in_channels = in_ch;
    c.out_channels = out_ch;
    c.ksize = ksize;
    c.stride = stride;
    c.weight_block = store.declare(name + ".weight", static_cast<long>(ksize) * ksize * in_ch, out_ch);
    c.bias_block = store.declare(name + ".bias", out_ch, 1);
    return c;
}

int Conv2d::out_dim(int in, int ksize, int stride) {
    const int pad = ksize / 2;
    return (in + 2 * pad - ksize) / stride + 1;
}

void Conv2d::init(Rng& rng) {
    auto w = store->value(weight_block);
    const double scale = std::sqrt(2.0 / static_cast<double>(ksize * ksize * in_channels));
    for (long j = 0; j < w.cols(); ++j)
        for (long i = 0; i < w.rows(); ++i) w(i, j) = normal(rng, 0.0, scale);
    store->value(bias_block).setZero();
}

void Conv2d::init_identity() {
    require(ksize == 1 && in_channels == out_channels, "Conv2d: identity init needs a square 1x1 kernel");
    store->value(weight_block) = Mat::Identity(in_channels, out_channels);
    store->value(bias_block).setZero();
}

Mat Conv2d::forward(const Mat& x, int h, int w, Ctx& ctx) const {
    require(x.cols() == in_channels, "Conv2d: input channel mismatch");
    require(x.rows() == static_cast<long>(h) * w, "Conv2d: input size mismatch");
    ctx.in_h = h;
    ctx.in_w = w;
    ctx.out_h = out_dim(h, ksize, stride);
    ctx.out_w = out_dim(w, ksize, stride);
    const int pad = ksize / 2;
    const long n_out = static_cast<long>(ctx.out_h) * ctx.out_w;

    ctx.cols.resize(n_out, static_cast<long>(ksize) * ksize * in_channels);
    if (ksize == 1 && stride == 1) {
        ctx.cols = x;
    } else if (stride == 1) {
        // Scanline gather: for a fixed kernel tap, consecutive output pixels
        // read consecutive input pixels, so whole row segments copy at once.
        ctx.cols.setZero();
        for (int ky = 0; ky < ksize; ++ky) {
            for (int kx = 0; kx < ksize; ++kx) {
                const long base = static_cast<long>(ky * ksize + kx) * in_channels;
                const int x_lo = std::max(0, pad - kx);
                const int x_hi = std::min(w, w + pad - kx);  // exclusive
                if (x_hi <= x_lo) continue;
                for (int yo = 0; yo < h; ++yo) {
                    const int yi = yo + ky - pad;
                    if (yi < 0 || yi >= h) continue;
                    ctx.cols.block(static_cast<long>(yo) * w + x_lo, base, x_hi - x_lo, in_channels) =
                        x.block(static_cast<long>(yi) * w + x_lo + kx - pad, 0, x_hi - x_lo, in_channels);
                }
            }
        }
    } else {
        ctx.cols.setZero();
        for (int yo = 0; yo < ctx.out_h; ++yo) {
            for (int xo = 0; xo < ctx.out_w; ++xo) {
                const long r = static_cast<long>(yo) * ctx.out_w + xo;
                for (int ky = 0; ky < ksize; ++ky) {
                    const int yi = yo * stride + ky - pad;
                    if (yi < 0 || yi >= h) continue;
                    for (int kx = 0; kx < ksize; ++kx) {
                        const int xi = xo * stride + kx - pad;
                        if (xi < 0 || xi >= w) continue;
                        const long src = static_cast<long>(yi) * w + xi;
                        ctx.cols.block(r, static_cast<long>(ky * ksize + kx) * in_channels, 1, in_channels) =
                            x.row(src);
                    }
                }
            }
        }
    }

    Mat y = ctx.cols * store->value(weight_block);
    y.rowwise() += store->value(bias_block).col(0).transpose();
    return y;
}

Mat Conv2d::backward(const Mat& dy, const Ctx& ctx) const {
    require(dy.cols() == out_channels, "Conv2d: grad channel mismatch");
    store->grad(weight_block).noalias() += ctx.cols.transpose() * dy;
    store->grad(bias_block).col(0) += dy.colwise().sum().transpose();

    const Mat dcols = dy * store->value(weight_block).transpose();
    if (ksize == 1 && stride == 1) return dcols;

    const int pad = ksize / 2;
    Mat dx = Mat::Zero(static_cast<long>(ctx.in_h) * ctx.in_w, in_channels);
    if (stride == 1) {
        const int h = ctx.in_h, w = ctx.in_w;
        for (int ky = 0; ky < ksize; ++ky) {
            for (int kx = 0; kx < ksize; ++kx) {
                const long base = static_cast<long>(ky * ksize + kx) * in_channels;
                const int x_lo = std::max(0, pad - kx);
                const int x_hi = std::min(w, w + pad - kx);
                if (x_hi <= x_lo) continue;
                for (int yo = 0; yo < h; ++yo) {
                    const int yi = yo + ky - pad;
                    if (yi < 0 || yi >= h) continue;
                    dx.block(static_cast<long>(yi) * w + x_lo + kx - pad, 0, x_hi - x_lo, in_channels) +=
                        dcols.block(static_cast<long>(yo) * w + x_lo, base, x_hi - x_lo, in_channels);
                }
            }
        }
        return dx;
    }
    for (int yo = 0; yo < ctx.out_h; ++yo) {
        for (int xo = 0; xo < ctx.out_w; ++xo) {
            const long r = static_cast<long>(yo) * ctx.out_w + xo;
            for (int ky = 0; ky < ksize; ++ky) {
                const int yi = yo * stride + ky - pad;
                if (yi < 0 || yi >= ctx.in_h) continue;
                for (int kx = 0; kx < ksize; ++kx) {
                    const int xi = xo * stride + kx - pad;
                    if (xi < 0 || xi >= ctx.in_w) continue;
                    const long dst = static_cast<long>(yi) * ctx.in_w + xi;
                    dx.row(dst) +=
                        dcols.block(r, static_cast<long>(ky * ksize + kx) * in_channels, 1, in_channels);
                }
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

Dense Dense::create(ParamStore& store, const std::string& name, int in_dim, int out_dim) {
    Dense d;
    d.store = &store;
    d.in_dim = in_dim;
    d.out_dim = out_dim;
    d.weight_block = store.declare(name + ".weight", in_dim, out_dim);
    d.bias_block = store.declare(name + ".bias", out_dim, 1);
    return d;
}

void Dense::init(Rng& rng) {
    auto w = store->value(weight_block);
    const double scale = std::sqrt(2.0 / static_cast<double>(in_dim));
    for (long j = 0; j < w.cols(); ++j)
        for (long i = 0; i < w.rows(); ++i) w(i, j) = normal(rng, 0.0, scale);
    store->value(bias_block).setZero();
}

Vec Dense::forward(const Vec& x) const {
    require(x.size() == in_dim, "Dense: input size mismatch");
    return store->value(weight_block).transpose() * x + store->value(bias_block).col(0);
}

Vec Dense::backward(const Vec& dy, const Vec& x) const {
    store->grad(weight_block).noalias() += x * dy.transpose();
    store->grad(bias_block).col(0) += dy;
    return store->value(weight_block) * dy;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_backward(const Mat& dy, const Mat& x) {
    return (x.array() > 0.0).select(dy, Mat::Zero(dy.rows(), dy.cols()));
}

Mat leaky_relu(const Mat& x, double slope) { return x.cwiseMax(slope * x); }

Mat leaky_relu_backward(const Mat& dy, const Mat& x, double slope) {
    return (x.array() > 0.0).select(dy, (slope * dy.array()).matrix());
}

Mat sigmoid(const Mat& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

Mat sigmoid_backward(const Mat& dy, const Mat& y) {
    return (dy.array() * y.array() * (1.0 - y.array())).matrix();
}

// ---------------------------------------------------------------------------
// Bilinear resampling
// ---------------------------------------------------------------------------

Mat upsample_bilinear(const Mat& x, int h, int w, int out_h, int out_w) {
    require(x.rows() == static_cast<long>(h) * w, "upsample_bilinear: input size mismatch");
    if (h == out_h && w == out_w) return x;
    Mat y(static_cast<long>(out_h) * out_w, x.cols());
    const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
    for (int yo = 0; yo < out_h; ++yo) {
        for (int xo = 0; xo < out_w; ++xo) {
            const BilinearTaps t =
                bilinear_taps(w, h, std::min(xo * sx, w - 1.0), std::min(yo * sy, h - 1.0));
            y.row(static_cast<long>(yo) * out_w + xo) =
                t.w00 * x.row(t.i00) + t.w01 * x.row(t.i01) + t.w10 * x.row(t.i10) + t.w11 * x.row(t.i11);
        }
    }
    return y;
}

Mat upsample_bilinear_backward(const Mat& dy, int h, int w, int out_h, int out_w) {
    require(dy.rows() == static_cast<long>(out_h) * out_w, "upsample_bilinear_backward: size mismatch");
    if (h == out_h && w == out_w) return dy;
    Mat dx = Mat::Zero(static_cast<long>(h) * w, dy.cols());
    const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
    for (int yo = 0; yo < out_h; ++yo) {
        for (int xo = 0; xo < out_w; ++xo) {
            const BilinearTaps t =
                bilinear_taps(w, h, std::min(xo * sx, w - 1.0), std::min(yo * sy, h - 1.0));
            const auto g = dy.row(static_cast<long>(yo) * out_w + xo);
            dx.row(t.i00) += t.w00 * g;
            dx.row(t.i01) += t.w01 * g;
            dx.row(t.i10) += t.w10 * g;
            dx.row(t.i11) += t.w11 * g;
        }
    }
    return dx;
}

BilinearTaps bilinear_taps(int w, int h, double x, double y) {
    if (!(x >= 0.0 && x <= w - 1.0 && y >= 0.0 && y <= h - 1.0))
        throw std::invalid_argument("bilinear_taps: position outside grid");
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    if (x0 == w - 1) x0 = std::max(0, w - 2);
    if (y0 == h - 1) y0 = std::max(0, h - 2);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    BilinearTaps t;
    t.i00 = static_cast<long>(y0) * w + x0;
    t.i01 = static_cast<long>(y0) * w + x1;
    t.i10 = static_cast<long>(y1) * w + x0;
    t.i11 = static_cast<long>(y1) * w + x1;
    t.w00 = (1 - fx) * (1 - fy);
    t.w01 = fx * (1 - fy);
    t.w10 = (1 - fx) * fy;
    t.w11 = fx * fy;
    return t;
}

Vec bilinear_sample(const Mat& grid, int w, int h, double x, double y) {
    const BilinearTaps t = bilinear_taps(w, h, x, y);
    return t.w00 * grid.row(t.i00).transpose() + t.w01 * grid.row(t.i01).transpose() +
           t.w10 * grid.row(t.i10).transpose() + t.w11 * grid.row(t.i11).transpose();
}

void bilinear_scatter(Mat& dgrid, int w, int h, double x, double y, const Vec& dv) {
    const BilinearTaps t = bilinear_taps(w, h, x, y);
    dgrid.row(t.i00) += t.w00 * dv.transpose();
    dgrid.row(t.i01) += t.w01 * dv.transpose();
    dgrid.row(t.i10) += t.w10 * dv.transpose();
    dgrid.row(t.i11) += t.w11 * dv.transpose();
}

// ---------------------------------------------------------------------------
// Row normalization
// ---------------------------------------------------------------------------

Mat l2_normalize_rows(const Mat& x, double eps) {
    Mat y = x;
    for (long i = 0; i < x.rows(); ++i) {
        const double n = std::max(x.row(i).norm(), eps);
        y.row(i) /= n;
    }
    return y;
}

Mat l2_normalize_rows_backward(const Mat& dy, const Mat& x, double eps) {
    Mat dx(x.rows(), x.cols());
    for (long i = 0; i < x.rows(); ++i) {
        const double n = std::max(x.row(i).norm(), eps);
        const Eigen::RowVectorXd y = x.row(i) / n;
        dx.row(i) = (dy.row(i) - y * y.dot(dy.row(i))) / n;
    }
    return dx;
}

Vec l2_normalize(const Vec& x, double eps) { return x / std::max(x.norm(), eps); }

Vec l2_normalize_backward(const Vec& dy, const Vec& x, double eps) {
    const double n = std::max(x.norm(), eps);
    const Vec y = x / n;
    return (dy - y * y.dot(dy)) / n;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(AdamConfig cfg, std::vector<ParamStore*> stores) : cfg_(cfg), stores_(std::move(stores)) {
    m_.reserve(stores_.size());
    v_.reserve(stores_.size());
    for (const ParamStore* s : stores_) {
        m_.push_back(Vec::Zero(s->size()));
        v_.push_back(Vec::Zero(s->size()));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < stores_.size(); ++k) {
        const Vec& g = stores_[k]->grads();
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const Vec mhat = m_[k] / bc1;
        const Vec vhat = v_[k] / bc2;
        stores_[k]->values() -=
            cfg_.lr * mhat.cwiseQuotient(vhat.cwiseSqrt().array().matrix() + Vec::Constant(vhat.size(), cfg_.eps));
    }
}

namespace {

void write_vec(std::ostream& out, const Vec& v) {
    const std::uint64_t n = static_cast<std::uint64_t>(v.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

Vec read_vec(std::istream& in) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    Vec v(static_cast<long>(n));
    in.read(reinterpret_cast<char*>(v.data()), sizeof(double) * static_cast<std::streamsize>(n));
    return v;
}

}  // namespace

void Adam::save(std::ostream& out) const {
    const std::uint64_t t = static_cast<std::uint64_t>(t_);
    const std::uint64_t k = m_.size();
    out.write(reinterpret_cast<const char*>(&t), sizeof(t));
    out.write(reinterpret_cast<const char*>(&k), sizeof(k));
    for (std::size_t i = 0; i < m_.size(); ++i) {
        write_vec(out, m_[i]);
        write_vec(out, v_[i]);
    }
}

void Adam::load(std::istream& in) {
    std::uint64_t t = 0, k = 0;
    in.read(reinterpret_cast<char*>(&t), sizeof(t));
    in.read(reinterpret_cast<char*>(&k), sizeof(k));
    require(k == m_.size(), "Adam: state store count mismatch on load");
    t_ = static_cast<long>(t);
    for (std::size_t i = 0; i < m_.size(); ++i) {
        m_[i] = read_vec(in);
        v_[i] = read_vec(in);
        require(m_[i].size() == stores_[i]->size(), "Adam: state size mismatch on load");
    }
}

}  // namespace uld::nn
