#include "waver/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "waver/error.hpp"

namespace waver {

namespace {

void put_u(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

    std::uint64_t u(int bytes) {
        need(bytes);
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += bytes;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) throw IoError("checkpoint truncated");
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TensorList& records) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    out.push_back(kCheckpointVersion);
    put_u(out, records.size(), 8);
    for (const auto& r : records) {
        put_u(out, r.name.size(), 4);
        out.insert(out.end(), r.name.begin(), r.name.end());
        const auto& s = r.tensor.shape();
        put_u(out, s.size(), 4);
        for (auto d : s) put_u(out, d, 8);
        for (double v : r.tensor.data()) put_u(out, std::bit_cast<std::uint64_t>(v), 8);
    }
    return out;
}

TensorList decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader rd(bytes);
    if (rd.str(8) != std::string(kCheckpointMagic, 8)) throw IoError("not a waver checkpoint (bad magic)");
    const auto version = rd.u(1);
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto count = rd.u(8);
    TensorList records;
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedTensor r;
        r.name = rd.str(rd.u(4));
        Shape shape(rd.u(4));
        for (auto& d : shape) d = rd.u(8);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = std::bit_cast<double>(rd.u(8));
        r.tensor = Tensor::from(std::move(shape), std::move(data));
        records.push_back(std::move(r));
    }
    if (!rd.done()) throw IoError("trailing bytes after checkpoint records");
    return records;
}

void save_checkpoint(const std::filesystem::path& path, const TensorList& records) {
    const auto bytes = encode_checkpoint(records);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

TensorList load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

const Tensor& find_tensor(const TensorList& records, const std::string& name) {
    for (const auto& r : records)
        if (r.name == name) return r.tensor;
    throw ContractError("checkpoint has no tensor named '" + name + "'");
}

bool has_tensor(const TensorList& records, const std::string& name) {
    for (const auto& r : records)
        if (r.name == name) return true;
    return false;
}

}  // namespace waver
