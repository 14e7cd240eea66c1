#pragma once

#include "uld/rng.hpp"
#include "uld/types.hpp"

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace uld::nn {

// Flat parameter/gradient storage shared by the layers of one network
// component. Layers hold block handles and view their slices through
// Eigen::Map, so a whole component can be optimized, checkpointed and
// checksummed as a single contiguous vector.
class ParamStore {
public:
    struct Block {
        std::string name;
        long offset = 0;
        long rows = 0;
        long cols = 0;
        long size() const { return rows * cols; }
    };

    int declare(const std::string& name, long rows, long cols);
    void finalize();
    bool finalized() const { return finalized_; }

    Eigen::Map<Mat> value(int block);
    Eigen::Map<const Mat> value(int block) const;
    Eigen::Map<Mat> grad(int block);

    Vec& values() { return value_; }
    const Vec& values() const { return value_; }
    Vec& grads() { return grad_; }
    const Vec& grads() const { return grad_; }

    long size() const { return static_cast<long>(value_.size()); }
    void zero_grad() { grad_.setZero(); }
    void zero_values() { value_.setZero(); }

    // FNV-1a over the raw parameter bytes; used by the frozen-state tests
    // and checkpoint integrity checks.
    std::uint64_t checksum() const;

private:
    std::vector<Block> blocks_;
    Vec value_;
    Vec grad_;
    bool finalized_ = false;
    long total_ = 0;
};

// ---------------------------------------------------------------------------
// Layers. Feature maps are (H*W) x C matrices, pixel index = y * W + x.
// forward() fills a caller-owned context so several images can be in flight;
// backward() accumulates parameter gradients into the store and returns the
// gradient w.r.t. the layer input.
// ---------------------------------------------------------------------------

struct Conv2d {
    ParamStore* store = nullptr;
    int weight_block = -1;
    int bias_block = -1;
    int in_channels = 0;
    int out_channels = 0;
    int ksize = 1;
    int stride = 1;

    struct Ctx {
        Mat cols;  // im2col matrix, (out_h*out_w) x (k*k*in_ch)
        int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
    };

    static Conv2d create(ParamStore& store, const std::string& name, int in_ch, int out_ch, int ksize,
                         int stride = 1);
    static int out_dim(int in, int ksize, int stride);

    // He-normal weights, zero bias.
    void init(Rng& rng);
    void init_identity();  // requires ksize == 1 and in_channels == out_channels

    Mat forward(const Mat& x, int h, int w, Ctx& ctx) const;
    Mat backward(const Mat& dy, const Ctx& ctx) const;
};

struct Dense {
    ParamStore* store = nullptr;
    int weight_block = -1;
    int bias_block = -1;
    int in_dim = 0;
    int out_dim = 0;

    static Dense create(ParamStore& store, const std::string& name, int in_dim, int out_dim);
    void init(Rng& rng);

    Vec forward(const Vec& x) const;
    Vec backward(const Vec& dy, const Vec& x) const;  // accumulates grads, returns dx
};

// Elementwise activations; backward takes whichever tensor makes the adjoint
// cheap (input for relu, output for sigmoid/tanh).
Mat relu(const Mat& x);
Mat relu_backward(const Mat& dy, const Mat& x);
Mat leaky_relu(const Mat& x, double slope = 0.1);
Mat leaky_relu_backward(const Mat& dy, const Mat& x, double slope = 0.1);
Mat sigmoid(const Mat& x);
Mat sigmoid_backward(const Mat& dy, const Mat& y);

// Bilinear resize between pixel-major grids, align-corners convention (an
// identity when sizes match). The backward form is the exact adjoint.
Mat upsample_bilinear(const Mat& x, int h, int w, int out_h, int out_w);
Mat upsample_bilinear_backward(const Mat& dy, int h, int w, int out_h, int out_w);

struct BilinearTaps {
    long i00 = 0, i01 = 0, i10 = 0, i11 = 0;
    double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
};

// Interpolation taps at real position (x, y); throws when outside
// [0, w-1] x [0, h-1].
BilinearTaps bilinear_taps(int w, int h, double x, double y);
Vec bilinear_sample(const Mat& grid, int w, int h, double x, double y);
void bilinear_scatter(Mat& dgrid, int w, int h, double x, double y, const Vec& dv);

Mat l2_normalize_rows(const Mat& x, double eps = 1e-12);
Mat l2_normalize_rows_backward(const Mat& dy, const Mat& x, double eps = 1e-12);
Vec l2_normalize(const Vec& x, double eps = 1e-12);
Vec l2_normalize_backward(const Vec& dy, const Vec& x, double eps = 1e-12);

// ---------------------------------------------------------------------------
// Adam over one or more parameter stores.
// ---------------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(AdamConfig cfg, std::vector<ParamStore*> stores);

    void step();
    long steps_taken() const { return t_; }

    void save(std::ostream& out) const;
    void load(std::istream& in);

private:
    AdamConfig cfg_;
    std::vector<ParamStore*> stores_;
    std::vector<Vec> m_;
    std::vector<Vec> v_;
    long t_ = 0;
};

}  // namespace uld::nn
