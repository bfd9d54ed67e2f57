#include "phenokit/tensor.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace phenokit {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

constexpr char kMagic[5] = {'P', 'T', 'N', 'S', '1'};

void put_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw InputError("tensor file truncated while reading dims");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
    out.write(kMagic, 5);
    const std::uint8_t code = static_cast<std::uint8_t>(dtype_of<T>());
    out.put(static_cast<char>(code));
    out.put(static_cast<char>(t.rank()));
    for (auto d : t.shape) put_u32_le(out, static_cast<std::uint32_t>(d));
    // Little-endian host assumed; checked at startup on the CLI path.
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(T)));
    if (!out) throw InputError("tensor write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kMagic, 5) != 0)
        throw InputError("bad tensor file: missing PTNS1 magic");
    const int code = in.get();
    const int rank = in.get();
    if (code == EOF || rank == EOF) throw InputError("tensor file truncated in header");
    if (code != static_cast<int>(dtype_of<T>()))
        throw InputError("tensor dtype mismatch: file has code " + std::to_string(code));
    if (rank < 0 || rank > 8) throw InputError("tensor rank out of range: " + std::to_string(rank));
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) {
        d = static_cast<std::int64_t>(get_u32_le(in));
        if (d <= 0) throw InputError("tensor file has non-positive dim");
    }
    const std::int64_t n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in) throw InputError("tensor file truncated: expected " + std::to_string(n) + " scalars");
    return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open for write: " + path);
    write_tensor(out, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open: " + path);
    return read_tensor<T>(in);
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::string&, const Tensor<float>&);
template void save_tensor<double>(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::string&);
template Tensor<double> load_tensor<double>(const std::string&);

}  // namespace phenokit
