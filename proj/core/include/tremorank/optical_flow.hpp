#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace tremorank {

/// Grayscale frame, row-major, intensities in [0, 1].
struct FrameGray {
    int width = 0;
    int height = 0;
    std::vector<double> intensities;

    FrameGray() = default;
    FrameGray(int w, int h, double fill = 0.0);

    double& at(int x, int y) { return intensities[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return intensities[static_cast<std::size_t>(y) * width + x]; }
};

/// Luma conversion (0.299 R + 0.587 G + 0.114 B) of interleaved 8-bit RGB.
FrameGray gray_from_rgb(std::span<const std::uint8_t> rgb, int width, int height);

/// Dense displacement field in pixels per frame interval.
struct FlowField {
    int width = 0;
    int height = 0;
    std::vector<double> u;
    std::vector<double> v;

    FlowField() = default;
    FlowField(int w, int h);
};

/// Horn-Schunck solver. Derivatives use the 2x2x2 cube stencils, which sit at
/// cell centres between pixels, so the iteration runs on the
/// (width-1) x (height-1) cell grid. The pixel-grid result averages the
/// (up to four) cells touching each pixel.
class HornSchunck {
public:
    HornSchunck(const FrameGray& first, const FrameGray& second, double alpha);

    /// One Jacobi sweep of the fixed-point update, all cells from the previous iterate.
    void step();
    void run(int iterations);

    /// Data term plus alpha^2 times the weighted-neighbour smoothness term
    /// whose gradient the update follows.
    double energy() const;

    int cell_width() const noexcept { return cw_; }
    int cell_height() const noexcept { return ch_; }
    const std::vector<double>& cell_u() const noexcept { return u_; }
    const std::vector<double>& cell_v() const noexcept { return v_; }

    FlowField pixel_flow() const;

private:
    void neighbour_average(const std::vector<double>& f, std::vector<double>& out) const;

    int width_;
    int height_;
    int cw_;
    int ch_;
    double alpha2_;
    std::vector<double> ex_, ey_, et_;
    std::vector<double> u_, v_;
    std::vector<double> ubar_, vbar_;
};

/// Flow after `iterations` sweeps from zero initialization.
FlowField horn_schunck(const FrameGray& a, const FrameGray& b, double alpha = 1.0, int iterations = 100);

/// Visualization: red 0, green = normalized u, blue = normalized v.
struct FlowImage {
    int width = 0;
    int height = 0;
    std::vector<double> red, green, blue;
    double u_min = 0, u_max = 0, v_min = 0, v_max = 0;

    /// Interleaved 8-bit RGB, round(x * 255).
    std::vector<std::uint8_t> to_rgb8() const;
};

FlowImage flow_to_rgb(const FlowField& flow);

/// Binary PPM (P6).
void write_ppm(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> rgb);

/// Half-pixel-centred bilinear resampling with edge clamping.
std::vector<double> resize_bilinear(std::span<const double> src, int width, int height, int out_width,
                                    int out_height);

enum class FlowNormalization {
    /// Per channel: subtract clip mean, divide by clip std (floor 1e-6).
    per_clip,
    /// Multiply by a fixed factor; keeps magnitudes comparable across clips.
    fixed_scale,
};

struct FlowOptions {
    double alpha = 1.0;
    int iterations = 100;
    /// Temporal and spatial extent of the output volume (64 for the full network).
    int extent = 64;
    FlowNormalization normalization = FlowNormalization::fixed_scale;
    /// Roughly the inverse of the flow standard deviation on the synthetic corpus.
    double scale = 14.0;
};

/// Network input: channels (u, v) x extent (time) x extent x extent, row-major.
struct FlowClipTensor {
    int extent = 0;
    std::vector<float> values;

    FlowClipTensor() = default;
    explicit FlowClipTensor(int e);

    std::size_t channel_size() const noexcept {
        return static_cast<std::size_t>(extent) * extent * extent;
    }
    std::span<const float> channel(int c) const {
        return {values.data() + static_cast<std::size_t>(c) * channel_size(), channel_size()};
    }
};

/// Flow for pairs (t, t+1), t < extent, resized to extent x extent and
/// normalized. Needs at least extent + 1 frames.
FlowClipTensor clip_to_tensor(std::span<const FrameGray> frames, const FlowOptions& options);

}  // namespace tremorank
