#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "icebeem/model.hpp"

// Flat binary containers, little-endian throughout (see docs/formats.md).
// Network container:  "ICEB" | u32 version | spec | per layer W row-major, b
// Model container:    "ICBM" | u32 version | u8 mode | f container |
//                     u8 g-kind | lookup matrix or g network container

namespace icebeem {

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::invalid_argument("serialize: truncated stream");
    return v;
}

inline void write_doubles(std::ostream& out, const double* p, std::size_t n) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::istream& in, double* p, std::size_t n) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::invalid_argument("serialize: truncated stream");
}

inline void expect_magic(std::istream& in, const char* magic) {
    char buf[4];
    in.read(buf, 4);
    if (!in || std::memcmp(buf, magic, 4) != 0)
        throw std::invalid_argument(std::string("serialize: bad magic, expected ") + magic);
}

}  // namespace detail

constexpr std::uint32_t kContainerVersion = 1;

inline void write_net(std::ostream& out, const MlpNet& net) {
    out.write("ICEB", 4);
    detail::write_pod(out, kContainerVersion);
    detail::write_pod(out, static_cast<std::uint32_t>(net.spec.dims.size()));
    for (std::size_t d : net.spec.dims) detail::write_pod(out, static_cast<std::uint64_t>(d));
    detail::write_pod(out, net.spec.leaky_slope);
    detail::write_pod(out, static_cast<std::uint8_t>(net.spec.output_activation));
    detail::write_pod(out, net.spec.seed);
    detail::write_pod(out, static_cast<std::uint8_t>(net.spec.allow_non_monotone ? 1 : 0));
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        detail::write_doubles(out, net.weights[l].data(), net.weights[l].size());
        detail::write_doubles(out, net.biases[l].data(), net.biases[l].size());
    }
}

inline MlpNet read_net(std::istream& in) {
    detail::expect_magic(in, "ICEB");
    const auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kContainerVersion)
        throw std::invalid_argument("serialize: unsupported container version " +
                                    std::to_string(version));
    MlpNet net;
    const auto n_dims = detail::read_pod<std::uint32_t>(in);
    if (n_dims < 2 || n_dims > 64) throw std::invalid_argument("serialize: implausible dims count");
    net.spec.dims.resize(n_dims);
    for (auto& d : net.spec.dims) d = detail::read_pod<std::uint64_t>(in);
    net.spec.leaky_slope = detail::read_pod<double>(in);
    net.spec.output_activation = static_cast<OutputActivation>(detail::read_pod<std::uint8_t>(in));
    net.spec.seed = detail::read_pod<std::uint64_t>(in);
    net.spec.allow_non_monotone = detail::read_pod<std::uint8_t>(in) != 0;
    net.spec.validate();
    for (std::size_t l = 0; l + 1 < net.spec.dims.size(); ++l) {
        Matrix w(net.spec.dims[l + 1], net.spec.dims[l]);
        detail::read_doubles(in, w.data(), w.size());
        Vector b(net.spec.dims[l + 1]);
        detail::read_doubles(in, b.data(), b.size());
        net.weights.push_back(std::move(w));
        net.biases.push_back(std::move(b));
    }
    return net;
}

inline void write_model(std::ostream& out, const IceBeemModel& model) {
    out.write("ICBM", 4);
    detail::write_pod(out, kContainerVersion);
    detail::write_pod(out, static_cast<std::uint8_t>(model.mode));
    write_net(out, model.f);
    detail::write_pod(out, static_cast<std::uint8_t>(model.g.kind));
    if (model.g.kind == ConditionEmbedding::Kind::lookup) {
        detail::write_pod(out, static_cast<std::uint64_t>(model.g.lookup.rows()));
        detail::write_pod(out, static_cast<std::uint64_t>(model.g.lookup.cols()));
        detail::write_doubles(out, model.g.lookup.data(), model.g.lookup.size());
    } else {
        write_net(out, *model.g.network);
    }
}

inline IceBeemModel read_model(std::istream& in) {
    detail::expect_magic(in, "ICBM");
    const auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kContainerVersion)
        throw std::invalid_argument("serialize: unsupported container version " +
                                    std::to_string(version));
    IceBeemModel model;
    model.mode = static_cast<ModelMode>(detail::read_pod<std::uint8_t>(in));
    model.f = read_net(in);
    const auto kind = static_cast<ConditionEmbedding::Kind>(detail::read_pod<std::uint8_t>(in));
    if (kind == ConditionEmbedding::Kind::lookup) {
        const auto rows = detail::read_pod<std::uint64_t>(in);
        const auto cols = detail::read_pod<std::uint64_t>(in);
        Matrix table(rows, cols);
        detail::read_doubles(in, table.data(), table.size());
        model.g = ConditionEmbedding::make_lookup(std::move(table));
    } else {
        model.g = ConditionEmbedding::make_network(read_net(in));
    }
    model.validate();
    return model;
}

inline void save_net(const MlpNet& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("save_net: cannot open " + path);
    write_net(out, net);
}

inline MlpNet load_net(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("load_net: cannot open " + path);
    return read_net(in);
}

inline void save_model(const IceBeemModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("save_model: cannot open " + path);
    write_model(out, model);
}

inline IceBeemModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("load_model: cannot open " + path);
    return read_model(in);
}

/// Human-readable mirror of the binary net container.
inline std::string net_text_dump(const MlpNet& net) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "mlp dims";
    for (std::size_t d : net.spec.dims) out << ' ' << d;
    out << "\nleaky_slope " << net.spec.leaky_slope;
    out << "\noutput_activation "
        << (net.spec.output_activation == OutputActivation::relu ? "relu" : "none");
    out << "\nseed " << net.spec.seed;
    out << "\nallow_non_monotone " << (net.spec.allow_non_monotone ? 1 : 0) << '\n';
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const Matrix& w = net.weights[l];
        out << "layer " << l << " weight " << w.rows() << 'x' << w.cols() << '\n';
        for (std::size_t i = 0; i < w.rows(); ++i) {
            for (std::size_t j = 0; j < w.cols(); ++j) out << (j ? " " : "") << w(i, j);
            out << '\n';
        }
        out << "layer " << l << " bias\n";
        for (std::size_t i = 0; i < net.biases[l].size(); ++i)
            out << (i ? " " : "") << net.biases[l][i];
        out << '\n';
    }
    return out.str();
}

inline void save_net_text(const MlpNet& net, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("save_net_text: cannot open " + path);
    out << net_text_dump(net);
}

}  // namespace icebeem
