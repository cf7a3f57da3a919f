// SPDX-License-Identifier: Apache-2.0
#include "cfphys/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "cfphys/error.hpp"

namespace cfphys::render {
namespace {

constexpr std::array<std::array<double, 3>, 8> kPalette{{
    {0.86, 0.20, 0.18},
    {0.16, 0.45, 0.82},
    {0.20, 0.66, 0.29},
    {0.93, 0.69, 0.13},
    {0.58, 0.30, 0.71},
    {0.10, 0.70, 0.74},
    {0.91, 0.45, 0.62},
    {0.35, 0.35, 0.35},
}};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

} // namespace

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(values.begin(), values.end(), 1)); }

std::array<double, 3> palette(int visual_id) {
    const auto n = static_cast<int>(kPalette.size());
    return kPalette[static_cast<std::size_t>(((visual_id % n) + n) % n)];
}

Frame background(int height, int width) {
    Frame f(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const double u = (x + 0.5) / width, v = (y + 0.5) / height;
            f.at(y, x, 0) = 0.92 - 0.10 * v;
            f.at(y, x, 1) = 0.92 - 0.06 * v - 0.04 * u;
            f.at(y, x, 2) = 0.90 - 0.08 * u;
        }
    return f;
}

Frame rasterize(const sim::Scene& scene, int height, int width) {
    if (height <= 0 || width <= 0) throw UsageError("rasterize: frame size must be positive");
    Frame f = background(height, width);
    const double px = static_cast<double>(std::min(height, width));
    std::vector<const sim::Body*> order;
    for (const auto& b : scene.bodies) order.push_back(&b);
    std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->visual_id < b->visual_id; });
    for (const sim::Body* b : order) {
        const auto col = palette(b->visual_id);
        const int y0 = std::max(0, static_cast<int>(std::floor((b->position.y - b->radius) * height)) - 1);
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil((b->position.y + b->radius) * height)) + 1);
        const int x0 = std::max(0, static_cast<int>(std::floor((b->position.x - b->radius) * width)) - 1);
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil((b->position.x + b->radius) * width)) + 1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d = std::hypot((x + 0.5) / width - b->position.x, (y + 0.5) / height - b->position.y);
                const double cover = std::clamp((b->radius - d) * px + 0.5, 0.0, 1.0);
                if (cover <= 0.0) continue;
                for (int c = 0; c < 3; ++c) f.at(y, x, c) += cover * (col[static_cast<std::size_t>(c)] - f.at(y, x, c));
            }
    }
    return f;
}

sim::Scene pose(const sim::Scene& scene, std::span<const sim::BodyState> states) {
    if (states.size() != scene.bodies.size()) throw UsageError("pose: state count differs from body count");
    sim::Scene s = scene;
    for (std::size_t i = 0; i < states.size(); ++i) {
        s.bodies[i].position = states[i].position;
        s.bodies[i].velocity = states[i].velocity;
    }
    return s;
}

std::vector<Frame> rasterize_trajectory(const sim::Scene& scene, const sim::Trajectory& traj, int height,
                                        int width) {
    std::vector<Frame> out;
    out.reserve(traj.frame_count());
    for (const auto& states : traj.frames) out.push_back(rasterize(pose(scene, states), height, width));
    return out;
}

Map gaussian_map(sim::Vec2 k, double sigma, int height, int width) {
    if (!(sigma > 0.0)) throw UsageError("gaussian_map: sigma must be > 0");
    Map m(height, width);
    const double inv = 1.0 / (sigma * sigma);
    for (int y = 0; y < height; ++y) {
        const double dy = (y + 0.5) / height - k.y;
        for (int x = 0; x < width; ++x) {
            const double dx = (x + 0.5) / width - k.x;
            m.at(y, x) = std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
    return m;
}

FilterBank make_filter_bank(int c, int size) {
    if (c < 1) throw UsageError("filter bank: C must be >= 1");
    if (size < 1 || size % 2 == 0) throw UsageError("filter bank: kernel size must be odd");
    FilterBank bank;
    bank.size = size;
    const int half = size / 2;
    for (int i = 1; i <= c; ++i) {
        const double theta = (i - 1) * std::numbers::pi / c;
        const double ct = std::cos(theta), st = std::sin(theta);
        std::vector<double> k(static_cast<std::size_t>(size * size));
        double total = 0.0;
        for (int r = 0; r < size; ++r)
            for (int col = 0; col < size; ++col) {
                const double dx = col - half, dy = r - half;
                const double w = std::max(0.0, 1.0 - std::abs(-st * dx + ct * dy));
                k[static_cast<std::size_t>(r * size + col)] = w;
                total += w;
            }
        for (double& w : k) w /= total;
        bank.kernels.push_back(std::move(k));
        bank.angles.push_back(theta);
    }
    return bank;
}

Map filter(const Map& map, std::span<const double> kernel, int size) {
    if (kernel.size() != static_cast<std::size_t>(size * size)) throw UsageError("filter: kernel size mismatch");
    Map out(map.height, map.width);
    const int half = size / 2;
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x) {
            double s = 0.0;
            for (int r = 0; r < size; ++r) {
                const int yy = y + r - half;
                if (yy < 0 || yy >= map.height) continue;
                for (int c = 0; c < size; ++c) {
                    const int xx = x + c - half;
                    if (xx < 0 || xx >= map.width) continue;
                    s += kernel[static_cast<std::size_t>(r * size + c)] * map.at(yy, xx);
                }
            }
            out.at(y, x) = s;
        }
    return out;
}

std::vector<Map> deform(std::span<const Map> maps, const KeypointState& state, const FilterBank& bank) {
    if (maps.size() != state.keypoints.size()) throw UsageError("deform: one map per keypoint");
    const auto c = static_cast<std::size_t>(bank.count());
    std::vector<Map> out;
    out.reserve(maps.size() * c);
    for (std::size_t k = 0; k < maps.size(); ++k) {
        const auto& coeffs = state.keypoints[k].coefficients;
        if (coeffs.size() != c + 1) throw UsageError("deform: keypoint needs C + 1 coefficients");
        const double gate = coeffs[c];
        for (std::size_t i = 0; i < c; ++i) {
            Map g = filter(maps[k], bank.kernels[i], bank.size);
            for (double& v : g.values) v *= gate * coeffs[i];
            out.push_back(std::move(g));
        }
    }
    return out;
}

Mask background_mask(const Frame& frame, const Frame& bg, double thresh) {
    if (frame.height != bg.height || frame.width != bg.width) throw UsageError("background_mask: shape mismatch");
    Mask raw{frame.height, frame.width, std::vector<std::uint8_t>(static_cast<std::size_t>(frame.height * frame.width))};
    for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x) {
            double d = 0.0;
            for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(frame.at(y, x, c) - bg.at(y, x, c)));
            raw.values[static_cast<std::size_t>(y * frame.width + x)] = d > thresh ? 1 : 0;
        }
    Mask out = raw;
    for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x) {
            std::uint8_t v = 0;
            for (int dy = -1; dy <= 1 && !v; ++dy)
                for (int dx = -1; dx <= 1 && !v; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < frame.height && xx >= 0 && xx < frame.width) v = raw.at(yy, xx);
                }
            out.values[static_cast<std::size_t>(y * frame.width + x)] = v;
        }
    return out;
}

KeypointState oracle_state(const sim::Scene& scene, std::span<const sim::BodyState> states, std::size_t slots,
                           int c, const KeypointState* fallback) {
    if (states.size() != scene.bodies.size()) throw UsageError("oracle_state: state count differs from body count");
    if (c < 1) throw UsageError("oracle_state: C must be >= 1");
    KeypointState st;
    st.keypoints.resize(slots);
    for (std::size_t k = 0; k < slots; ++k) {
        st.keypoints[k].coefficients.assign(static_cast<std::size_t>(c) + 1, 0.0);
        st.keypoints[k].position = fallback && k < fallback->keypoints.size() ? fallback->keypoints[k].position
                                                                              : sim::Vec2{0.5, 0.5};
    }
    for (std::size_t i = 0; i < scene.bodies.size(); ++i) {
        const auto& b = scene.bodies[i];
        const auto k = static_cast<std::size_t>(b.visual_id);
        if (k >= slots) throw UsageError("oracle_state: visual_id beyond slot count");
        const auto col = palette(b.visual_id);
        const std::array<double, 4> features{std::clamp((b.radius - 0.03) / 0.05, 0.0, 1.0), col[0], col[1], col[2]};
        auto& kp = st.keypoints[k];
        kp.position = states[i].position;
        for (int j = 0; j < c; ++j) kp.coefficients[static_cast<std::size_t>(j)] = features[static_cast<std::size_t>(j) % 4];
        kp.coefficients[static_cast<std::size_t>(c)] = 1.0;
    }
    return st;
}

std::vector<Frame> latent_sweep(const KeypointState& state, std::size_t kp, std::size_t component,
                                std::span<const double> grid, const Decoder& decoder) {
    if (!decoder) throw PrereqError("latent_sweep: no trained decoder");
    if (kp >= state.keypoints.size()) throw UsageError("latent_sweep: keypoint index out of range");
    if (component >= 2 + state.keypoints[kp].coefficients.size())
        throw UsageError("latent_sweep: component index out of range");
    std::vector<Frame> out;
    for (double v : grid) {
        KeypointState s = state;
        auto& k = s.keypoints[kp];
        if (component == 0) k.position.x = v;
        else if (component == 1) k.position.y = v;
        else k.coefficients[component - 2] = v;
        out.push_back(decoder(s));
    }
    return out;
}

Frame contact_sheet(std::span<const Frame> frames, int columns) {
    if (frames.empty()) return {};
    if (columns < 1) throw UsageError("contact_sheet: columns must be >= 1");
    const int h = frames[0].height, w = frames[0].width;
    const int n = static_cast<int>(frames.size());
    const int cols = std::min(columns, n);
    const int rows = (n + cols - 1) / cols;
    Frame sheet(rows * (h + 1) + 1, cols * (w + 1) + 1, 1.0);
    for (int i = 0; i < n; ++i) {
        const Frame& f = frames[static_cast<std::size_t>(i)];
        if (f.height != h || f.width != w) throw UsageError("contact_sheet: frames differ in size");
        const int oy = 1 + (i / cols) * (h + 1), ox = 1 + (i % cols) * (w + 1);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) sheet.at(oy + y, ox + x, c) = f.at(y, x, c);
    }
    return sheet;
}

Frame resize(const Frame& frame, int height, int width) {
    Frame out(height, width);
    for (int y = 0; y < height; ++y) {
        const double sy = std::clamp((y + 0.5) * frame.height / height - 0.5, 0.0, frame.height - 1.0);
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, frame.height - 1);
        const double fy = sy - y0;
        for (int x = 0; x < width; ++x) {
            const double sx = std::clamp((x + 0.5) * frame.width / width - 0.5, 0.0, frame.width - 1.0);
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, frame.width - 1);
            const double fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = frame.at(y0, x0, c) * (1 - fx) + frame.at(y0, x1, c) * fx;
                const double bot = frame.at(y1, x0, c) * (1 - fx) + frame.at(y1, x1, c) * fx;
                out.at(y, x, c) = top * (1 - fy) + bot * fy;
            }
        }
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Frame& frame) {
    std::vector<std::uint8_t> bytes(frame.pixels.size());
    std::transform(frame.pixels.begin(), frame.pixels.end(), bytes.begin(), to_byte);
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(frame.width);
    img.height = static_cast<png_uint_32>(frame.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr))
        throw IoError("write_png: " + path.string() + ": " + img.message);
}

Frame read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw IoError("read_png: " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr))
        throw IoError("read_png: " + path.string() + ": " + img.message);
    Frame f(static_cast<int>(img.height), static_cast<int>(img.width));
    for (std::size_t i = 0; i < bytes.size(); ++i) f.pixels[i] = bytes[i] / 255.0;
    return f;
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_pgm: cannot open " + path.string());
    out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
    for (auto v : mask.values) out.put(static_cast<char>(v ? 255 : 0));
    if (!out) throw IoError("write_pgm: write failed for " + path.string());
}

double psnr(const Frame& pred, const Frame& gt) {
    if (pred.height != gt.height || pred.width != gt.width) throw UsageError("psnr: frame sizes differ");
    double se = 0.0;
    for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
        const double d = pred.pixels[i] - gt.pixels[i];
        se += d * d;
    }
    if (se == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(static_cast<double>(gt.pixels.size()) / se));
}

sim::Vec2 mask_centroid(const Mask& mask) {
    double sx = 0.0, sy = 0.0, n = 0.0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(y, x)) {
                sx += (x + 0.5) / mask.width;
                sy += (y + 0.5) / mask.height;
                n += 1.0;
            }
    if (n == 0.0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    return {sx / n, sy / n};
}

} // namespace cfphys::render
