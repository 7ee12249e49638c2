#include "xmreg/image_io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "xmreg/errors.hpp"

namespace xmreg::io {

namespace {

// skips whitespace and '#' comment lines between header tokens
int next_token(std::istream& f) {
    int c = f.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = f.get();
        } else if (!std::isspace(c)) {
            f.unget();
            break;
        }
        c = f.get();
    }
    return c;
}

int64_t read_int(std::istream& f) {
    next_token(f);
    int64_t v = 0;
    f >> v;
    return v;
}

} // namespace

Tensor load_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingFile("cannot open image: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P5" && magic != "P2") throw Error("unsupported PGM magic in " + path);
    const int64_t w = read_int(f);
    const int64_t h = read_int(f);
    const int64_t maxval = read_int(f);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
        throw Error("bad PGM header in " + path);

    Tensor img({1, h, w});
    double* p = img.data();
    if (magic == "P2") {
        for (int64_t i = 0; i < h * w; ++i) {
            int64_t v;
            f >> v;
            p[i] = static_cast<double>(v) / static_cast<double>(maxval);
        }
    } else {
        f.get(); // single whitespace after maxval
        if (maxval < 256) {
            std::vector<unsigned char> buf(static_cast<size_t>(h * w));
            f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            for (int64_t i = 0; i < h * w; ++i)
                p[i] = buf[static_cast<size_t>(i)] / static_cast<double>(maxval);
        } else {
            std::vector<unsigned char> buf(static_cast<size_t>(h * w * 2));
            f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            for (int64_t i = 0; i < h * w; ++i) {
                const int v = (buf[static_cast<size_t>(2 * i)] << 8) | buf[static_cast<size_t>(2 * i + 1)];
                p[i] = v / static_cast<double>(maxval);
            }
        }
    }
    if (!f) throw Error("truncated PGM: " + path);
    return img;
}

void save_pgm(const std::string& path, const Tensor& img, double lo, double hi) {
    const int64_t h = img.ndim() == 3 ? img.dim(1) : img.dim(0);
    const int64_t w = img.ndim() == 3 ? img.dim(2) : img.dim(1);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write image: " + path);
    f << "P5\n" << w << " " << h << "\n65535\n";
    const double* p = img.data();
    const double scale = hi > lo ? 65535.0 / (hi - lo) : 0.0;
    std::vector<unsigned char> buf(static_cast<size_t>(h * w * 2));
    for (int64_t i = 0; i < h * w; ++i) {
        const double clamped = std::min(hi, std::max(lo, p[i]));
        const int v = static_cast<int>(std::lround((clamped - lo) * scale));
        buf[static_cast<size_t>(2 * i)] = static_cast<unsigned char>(v >> 8);
        buf[static_cast<size_t>(2 * i + 1)] = static_cast<unsigned char>(v & 0xff);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw Error("write failed: " + path);
}

} // namespace xmreg::io
