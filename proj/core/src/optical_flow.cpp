#include "tremorank/optical_flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "tremorank/error.hpp"
#include "tremorank/parallel.hpp"

namespace tremorank {

FrameGray::FrameGray(int w, int h, double fill)
    : width(w), height(h), intensities(static_cast<std::size_t>(w) * h, fill) {
    if (w <= 0 || h <= 0) {
        throw DomainError("FrameGray: dimensions must be positive");
    }
}

FlowField::FlowField(int w, int h)
    : width(w), height(h), u(static_cast<std::size_t>(w) * h, 0.0), v(static_cast<std::size_t>(w) * h, 0.0) {}

FlowClipTensor::FlowClipTensor(int e) : extent(e), values(2 * static_cast<std::size_t>(e) * e * e, 0.0f) {}

FrameGray gray_from_rgb(std::span<const std::uint8_t> rgb, int width, int height) {
    FrameGray frame(width, height);
    if (rgb.size() != 3 * frame.intensities.size()) {
        throw ShapeError("gray_from_rgb: expected " + std::to_string(3 * frame.intensities.size()) +
                         " bytes, got " + std::to_string(rgb.size()));
    }
    for (std::size_t i = 0; i < frame.intensities.size(); ++i) {
        frame.intensities[i] =
            (0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2]) / 255.0;
    }
    return frame;
}

HornSchunck::HornSchunck(const FrameGray& first, const FrameGray& second, double alpha)
    : width_(first.width), height_(first.height) {
    if (first.width != second.width || first.height != second.height) {
        throw ShapeError("horn_schunck: frame sizes differ (" + std::to_string(first.width) + "x" +
                         std::to_string(first.height) + " vs " + std::to_string(second.width) + "x" +
                         std::to_string(second.height) + ")");
    }
    if (first.width < 2 || first.height < 2) {
        throw ShapeError("horn_schunck: frames must be at least 2x2");
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw DomainError("horn_schunck: alpha must be positive, got " + std::to_string(alpha));
    }
    alpha2_ = alpha * alpha;
    cw_ = width_ - 1;
    ch_ = height_ - 1;
    const std::size_t n = static_cast<std::size_t>(cw_) * ch_;
    ex_.resize(n);
    ey_.resize(n);
    et_.resize(n);
    u_.assign(n, 0.0);
    v_.assign(n, 0.0);
    ubar_.resize(n);
    vbar_.resize(n);

    const auto& e0 = first.intensities;
    const auto& e1 = second.intensities;
    auto idx = [w = width_](int x, int y) { return static_cast<std::size_t>(y) * w + x; };
    for (int y = 0; y < ch_; ++y) {
        for (int x = 0; x < cw_; ++x) {
            const std::size_t a = idx(x, y), b = idx(x + 1, y), c = idx(x, y + 1), d = idx(x + 1, y + 1);
            const std::size_t i = static_cast<std::size_t>(y) * cw_ + x;
            // Each derivative averages four first differences over the cube.
            ex_[i] = 0.25 * (((e0[b] - e0[a]) + (e0[d] - e0[c])) + ((e1[b] - e1[a]) + (e1[d] - e1[c])));
            ey_[i] = 0.25 * (((e0[c] - e0[a]) + (e0[d] - e0[b])) + ((e1[c] - e1[a]) + (e1[d] - e1[b])));
            et_[i] = 0.25 * (((e1[a] - e0[a]) + (e1[b] - e0[b])) + ((e1[c] - e0[c]) + (e1[d] - e0[d])));
        }
    }
}

void HornSchunck::neighbour_average(const std::vector<double>& f, std::vector<double>& out) const {
    // 1/6 on edge neighbours, 1/12 on diagonals, replicated borders. Mirror
    // pairs are summed first so a reflected input gives a reflected output
    // bit for bit.
    for (int y = 0; y < ch_; ++y) {
        const int ym = std::max(y - 1, 0), yp = std::min(y + 1, ch_ - 1);
        for (int x = 0; x < cw_; ++x) {
            const int xm = std::max(x - 1, 0), xp = std::min(x + 1, cw_ - 1);
            auto at = [&](int xx, int yy) { return f[static_cast<std::size_t>(yy) * cw_ + xx]; };
            const double edges = (at(xm, y) + at(xp, y)) + (at(x, ym) + at(x, yp));
            const double diag = (at(xm, ym) + at(xp, ym)) + (at(xm, yp) + at(xp, yp));
            out[static_cast<std::size_t>(y) * cw_ + x] = edges / 6.0 + diag / 12.0;
        }
    }
}

void HornSchunck::step() {
    neighbour_average(u_, ubar_);
    neighbour_average(v_, vbar_);
    for (std::size_t i = 0; i < u_.size(); ++i) {
        const double r = (ex_[i] * ubar_[i] + ey_[i] * vbar_[i] + et_[i]) /
                         (alpha2_ + ex_[i] * ex_[i] + ey_[i] * ey_[i]);
        u_[i] = ubar_[i] - ex_[i] * r;
        v_[i] = vbar_[i] - ey_[i] * r;
    }
}

void HornSchunck::run(int iterations) {
    if (iterations < 1) {
        throw DomainError("horn_schunck: iterations must be >= 1, got " + std::to_string(iterations));
    }
    for (int k = 0; k < iterations; ++k) {
        step();
    }
}

double HornSchunck::energy() const {
    double data = 0.0;
    for (std::size_t i = 0; i < u_.size(); ++i) {
        const double r = ex_[i] * u_[i] + ey_[i] * v_[i] + et_[i];
        data += r * r;
    }
    // Each unordered neighbour pair once: right and down edges (1/6),
    // both diagonals (1/12).
    double smooth = 0.0;
    auto pair = [&](std::size_t i, std::size_t j, double w) {
        const double du = u_[i] - u_[j];
        const double dv = v_[i] - v_[j];
        smooth += w * (du * du + dv * dv);
    };
    for (int y = 0; y < ch_; ++y) {
        for (int x = 0; x < cw_; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * cw_ + x;
            if (x + 1 < cw_) pair(i, i + 1, 1.0 / 6.0);
            if (y + 1 < ch_) pair(i, i + cw_, 1.0 / 6.0);
            if (x + 1 < cw_ && y + 1 < ch_) pair(i, i + cw_ + 1, 1.0 / 12.0);
            if (x > 0 && y + 1 < ch_) pair(i, i + cw_ - 1, 1.0 / 12.0);
        }
    }
    return data + alpha2_ * smooth;
}

FlowField HornSchunck::pixel_flow() const {
    FlowField out(width_, height_);
    auto cell = [&](const std::vector<double>& f, int x, int y) {
        x = std::clamp(x, 0, cw_ - 1);
        y = std::clamp(y, 0, ch_ - 1);
        return f[static_cast<std::size_t>(y) * cw_ + x];
    };
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * width_ + x;
            out.u[i] = 0.25 * ((cell(u_, x - 1, y - 1) + cell(u_, x, y - 1)) + (cell(u_, x - 1, y) + cell(u_, x, y)));
            out.v[i] = 0.25 * ((cell(v_, x - 1, y - 1) + cell(v_, x, y - 1)) + (cell(v_, x - 1, y) + cell(v_, x, y)));
        }
    }
    return out;
}

FlowField horn_schunck(const FrameGray& a, const FrameGray& b, double alpha, int iterations) {
    HornSchunck solver(a, b, alpha);
    solver.run(iterations);
    return solver.pixel_flow();
}

namespace {

void normalize_channel(const std::vector<double>& src, std::vector<double>& dst, double& lo, double& hi) {
    const auto [mn, mx] = std::minmax_element(src.begin(), src.end());
    lo = *mn;
    hi = *mx;
    dst.resize(src.size());
    if (!(hi > lo)) {
        std::fill(dst.begin(), dst.end(), 0.5);
        return;
    }
    const double range = hi - lo;
    std::transform(src.begin(), src.end(), dst.begin(), [lo, range](double x) { return (x - lo) / range; });
}

}  // namespace

FlowImage flow_to_rgb(const FlowField& flow) {
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        if (!std::isfinite(flow.u[i]) || !std::isfinite(flow.v[i])) {
            throw DomainError("flow_to_rgb: non-finite flow value");
        }
    }
    FlowImage img;
    img.width = flow.width;
    img.height = flow.height;
    img.red.assign(flow.u.size(), 0.0);
    normalize_channel(flow.u, img.green, img.u_min, img.u_max);
    normalize_channel(flow.v, img.blue, img.v_min, img.v_max);
    return img;
}

std::vector<std::uint8_t> FlowImage::to_rgb8() const {
    std::vector<std::uint8_t> out(3 * red.size());
    auto q = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
    for (std::size_t i = 0; i < red.size(); ++i) {
        out[3 * i] = q(red[i]);
        out[3 * i + 1] = q(green[i]);
        out[3 * i + 2] = q(blue[i]);
    }
    return out;
}

void write_ppm(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> rgb) {
    if (rgb.size() != 3 * static_cast<std::size_t>(width) * height) {
        throw ShapeError("write_ppm: pixel buffer does not match " + std::to_string(width) + "x" +
                         std::to_string(height));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << "P6\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

std::vector<double> resize_bilinear(std::span<const double> src, int width, int height, int out_width,
                                    int out_height) {
    if (src.size() != static_cast<std::size_t>(width) * height) {
        throw ShapeError("resize_bilinear: buffer size does not match dimensions");
    }
    if (out_width <= 0 || out_height <= 0) {
        throw DomainError("resize_bilinear: output dimensions must be positive");
    }
    std::vector<double> out(static_cast<std::size_t>(out_width) * out_height);
    const double sx = static_cast<double>(width) / out_width;
    const double sy = static_cast<double>(height) / out_height;
    for (int oy = 0; oy < out_height; ++oy) {
        const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, height - 1);
        const double wy = fy - y0;
        for (int ox = 0; ox < out_width; ++ox) {
            const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, width - 1);
            const double wx = fx - x0;
            auto at = [&](int x, int y) { return src[static_cast<std::size_t>(y) * width + x]; };
            const double top = at(x0, y0) + wx * (at(x1, y0) - at(x0, y0));
            const double bottom = at(x0, y1) + wx * (at(x1, y1) - at(x0, y1));
            out[static_cast<std::size_t>(oy) * out_width + ox] = top + wy * (bottom - top);
        }
    }
    return out;
}

FlowClipTensor clip_to_tensor(std::span<const FrameGray> frames, const FlowOptions& options) {
    const int extent = options.extent;
    if (extent < 1) {
        throw DomainError("clip_to_tensor: extent must be positive");
    }
    if (frames.size() < static_cast<std::size_t>(extent) + 1) {
        throw DomainError("clip_to_tensor: need at least " + std::to_string(extent + 1) + " frames, got " +
                          std::to_string(frames.size()));
    }
    for (const auto& f : frames) {
        if (f.width != frames[0].width || f.height != frames[0].height) {
            throw ShapeError("clip_to_tensor: frames differ in size");
        }
    }

    FlowClipTensor tensor(extent);
    const std::size_t plane = static_cast<std::size_t>(extent) * extent;
    const std::size_t channel = tensor.channel_size();
    std::vector<std::vector<double>> u_planes(static_cast<std::size_t>(extent));
    std::vector<std::vector<double>> v_planes(static_cast<std::size_t>(extent));
    parallel_for(static_cast<std::size_t>(extent), [&](std::size_t t) {
        const FlowField flow = horn_schunck(frames[t], frames[t + 1], options.alpha, options.iterations);
        u_planes[t] = resize_bilinear(flow.u, flow.width, flow.height, extent, extent);
        v_planes[t] = resize_bilinear(flow.v, flow.width, flow.height, extent, extent);
    });

    for (int c = 0; c < 2; ++c) {
        const auto& planes = c == 0 ? u_planes : v_planes;
        double offset = 0.0;
        double factor = options.scale;
        if (options.normalization == FlowNormalization::per_clip) {
            double sum = 0.0;
            for (const auto& p : planes) {
                for (const double x : p) sum += x;
            }
            const double mean = sum / static_cast<double>(channel);
            double sq = 0.0;
            for (const auto& p : planes) {
                for (const double x : p) sq += (x - mean) * (x - mean);
            }
            const double sd = std::max(std::sqrt(sq / static_cast<double>(channel)), 1e-6);
            offset = mean;
            factor = 1.0 / sd;
        }
        float* dst = tensor.values.data() + static_cast<std::size_t>(c) * channel;
        for (std::size_t t = 0; t < planes.size(); ++t) {
            for (std::size_t i = 0; i < plane; ++i) {
                dst[t * plane + i] = static_cast<float>((planes[t][i] - offset) * factor);
            }
        }
    }
    return tensor;
}

}  // namespace tremorank
