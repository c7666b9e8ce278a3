#include "sqa/audio_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "sqa/dsp.hpp"
#include "sqa/errors.hpp"

namespace sqa::audio_io {

namespace {

template <class T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;  // little-endian host assumed
}

template <class T>
void append_le(std::string& buf, T v) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open wav file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();

  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw FormatError("not a RIFF/WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_size = 0;
  bool have_fmt = false;

  std::size_t off = 12;
  while (off + 8 <= n) {
    const char* id = reinterpret_cast<const char*>(p + off);
    const std::uint32_t chunk_size = read_le<std::uint32_t>(p + off + 4);
    const std::size_t body = off + 8;
    if (body + chunk_size > n) throw FormatError("truncated chunk in wav file: " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw FormatError("short fmt chunk: " + path);
      format = read_le<std::uint16_t>(p + body);
      channels = read_le<std::uint16_t>(p + body + 2);
      rate = read_le<std::uint32_t>(p + body + 4);
      bits = read_le<std::uint16_t>(p + body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = p + body;
      data_size = chunk_size;
    }
    off = body + chunk_size + (chunk_size & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr) throw FormatError("missing fmt/data chunk: " + path);
  if (rate == 0) throw FormatError("zero sample rate: " + path);
  if (channels != 1 && channels != 2)
    throw UnsupportedError("unsupported channel count " + std::to_string(channels) + ": " + path);
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw UnsupportedError("unsupported codec (format " + std::to_string(format) + ", " +
                           std::to_string(bits) + " bit): " + path);

  const std::uint32_t bytes_per_sample = bits / 8;
  const std::uint32_t frame_size = bytes_per_sample * channels;
  const std::uint32_t frames = data_size / frame_size;
  if (frames == 0) throw EmptyClipError("wav file has no samples: " + path);

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  for (std::uint32_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* s = data + i * frame_size + c * bytes_per_sample;
      if (pcm16)
        acc += static_cast<double>(read_le<std::int16_t>(s)) / 32768.0;
      else
        acc += static_cast<double>(read_le<float>(s));
    }
    w.samples[i] = acc / channels;
  }
  return w;
}

std::string to_wav_bytes(const Waveform& w) {
  if (w.samples.empty()) throw ValidationError("refusing to serialize an empty waveform");
  if (w.sample_rate <= 0) throw ValidationError("invalid sample rate");
  for (double v : w.samples)
    if (!std::isfinite(v)) throw ValidationError("non-finite sample in waveform");

  const auto n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_size = n * 4;
  std::string buf;
  buf.reserve(44 + data_size);
  buf.append("RIFF");
  append_le<std::uint32_t>(buf, 36 + data_size);
  buf.append("WAVE");
  buf.append("fmt ");
  append_le<std::uint32_t>(buf, 16);
  append_le<std::uint16_t>(buf, 3);  // IEEE float
  append_le<std::uint16_t>(buf, 1);
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(w.sample_rate));
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(w.sample_rate) * 4);
  append_le<std::uint16_t>(buf, 4);
  append_le<std::uint16_t>(buf, 32);
  buf.append("data");
  append_le<std::uint32_t>(buf, data_size);
  for (double v : w.samples) append_le<float>(buf, static_cast<float>(v));
  return buf;
}

void write_wav(const Waveform& w, const std::string& path) {
  std::string buf;
  try {
    buf = to_wav_bytes(w);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(e.what()) + ": " + path);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write: " + path);
}

Waveform resample(const Waveform& w, int target_rate) {
  if (target_rate <= 0) throw ValidationError("target rate must be positive");
  if (target_rate == w.sample_rate) return w;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples = dsp::resample_sinc(w.samples, static_cast<double>(target_rate) / w.sample_rate);
  return out;
}

double peak_abs(const Waveform& w) {
  double peak = 0.0;
  for (double v : w.samples) peak = std::max(peak, std::fabs(v));
  return peak;
}

double energy(const std::vector<double>& samples) {
  double e = 0.0;
  for (double v : samples) e += v * v;
  return e;
}

double rms(const std::vector<double>& samples) {
  if (samples.empty()) return 0.0;
  return std::sqrt(energy(samples) / static_cast<double>(samples.size()));
}

}  // namespace sqa::audio_io
