//! Bit-exact session wire format and rate accounting.
//!
//! A `.mvfc` stream is a session header followed by frame payloads in frame
//! order, little-endian throughout:
//!
//! * header: magic `MVFC`, version u16, view count u8, then per view a
//!   frame_index u32, view_bits u32, and `ceil(view_bits / 8)` opaque bytes
//!   of externally coded image data (source views are transmitted once);
//! * frame payload: frame_index u32, then 10 keypoints x 2 coordinates as
//!   IEEE 754 binary16 — exactly 320 bits of coordinate data per frame.
//!
//! The ledger tracks pure payload quantities (declared view bits, 320
//! coordinate bits per frame) separately from container overhead (magic,
//! length fields, frame indices, byte padding), so rate curves can use
//! payload-only accounting.

use crate::error::{Error, Result};
use crate::motion::{KeypointSet, KEYPOINT_COUNT};
use std::io::{Read, Write};

pub const SESSION_MAGIC: &[u8; 4] = b"MVFC";
pub const SESSION_VERSION: u16 = 1;

/// Coordinate payload: 10 keypoints x 2 coords x 16 bits.
pub const COORD_BITS_PER_FRAME: u64 = (KEYPOINT_COUNT as u64) * 2 * 16;
/// Coordinate payload in bytes (40).
pub const COORD_BYTES_PER_FRAME: usize = KEYPOINT_COUNT * 2 * 2;
/// Full on-wire frame payload: u32 frame index + coordinates.
pub const FRAME_WIRE_BYTES: usize = 4 + COORD_BYTES_PER_FRAME;

const HEADER_FIXED_BITS: u64 = 8 * (4 + 2 + 1); // magic + version + view count
const VIEW_FIELD_BITS: u64 = 8 * (4 + 4); // frame_index + view_bits
const FRAME_INDEX_BITS: u64 = 32;

// --- binary16 conversion -------------------------------------------------

/// Convert f32 to IEEE 754 binary16 bits with round-to-nearest-even.
pub fn f32_to_half_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;
    if exp == 0xFF {
        // Inf or NaN; keep NaN quiet.
        return if man != 0 {
            sign | 0x7E00
        } else {
            sign | 0x7C00
        };
    }
    if exp == 0 {
        // f32 subnormals are below 2^-126, far under half's 2^-24 ulp.
        return sign;
    }
    let half_exp = exp - 127 + 15;
    if half_exp >= 31 {
        return sign | 0x7C00;
    }
    if half_exp <= 0 {
        // Subnormal result: shift the 24-bit significand (hidden bit set)
        // down to the 2^-24 grid with round-to-nearest-even.
        let m = 0x0080_0000 | man;
        let shift = (14 - half_exp) as u32;
        if shift > 24 {
            return sign;
        }
        let kept = m >> shift;
        let rem = m & ((1u32 << shift) - 1);
        let half = 1u32 << (shift - 1);
        let rounded = if rem > half || (rem == half && kept & 1 == 1) {
            kept + 1
        } else {
            kept
        };
        // A carry into bit 10 lands on the smallest normal, which is the
        // correct encoding since its exponent field becomes 1.
        return sign | rounded as u16;
    }
    let kept = man >> 13;
    let rem = man & 0x1FFF;
    let rounded = if rem > 0x1000 || (rem == 0x1000 && kept & 1 == 1) {
        kept + 1
    } else {
        kept
    };
    // Mantissa overflow carries into the exponent (and saturates to
    // infinity at half_exp 31), matching IEEE rounding.
    sign | (((half_exp as u32) << 10) + rounded) as u16
}

/// Expand binary16 bits to f32 (exact).
pub fn half_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let man = (h & 0x03FF) as u32;
    if exp == 31 {
        let bits = sign | 0x7F80_0000 | (man << 13);
        return f32::from_bits(bits);
    }
    if exp == 0 {
        // Subnormal: man * 2^-24, exact in f32.
        let magnitude = man as f32 * (-24f32).exp2();
        return if sign != 0 { -magnitude } else { magnitude };
    }
    f32::from_bits(sign | ((exp + 112) << 23) | (man << 13))
}

// --- frame payload --------------------------------------------------------

/// One transmitted frame: index plus the 320-bit coordinate field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePayload {
    pub frame_index: u32,
    coords: [u16; KEYPOINT_COUNT * 2],
}

impl FramePayload {
    /// Raw coordinate bytes (exactly 40, little-endian).
    pub fn coordinate_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(COORD_BYTES_PER_FRAME);
        for c in self.coords {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_WIRE_BYTES);
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend(self.coordinate_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != FRAME_WIRE_BYTES {
            return Err(Error::Bitstream(format!(
                "frame payload is {} bytes, expected {FRAME_WIRE_BYTES}",
                bytes.len()
            )));
        }
        let frame_index = u32::from_le_bytes(bytes[0..4].try_into().expect("sized"));
        let mut coords = [0u16; KEYPOINT_COUNT * 2];
        for (i, c) in coords.iter_mut().enumerate() {
            let off = 4 + 2 * i;
            *c = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
        }
        Ok(Self {
            frame_index,
            coords,
        })
    }

    /// Decode the coordinate field, rejecting NaN/Inf and out-of-range values.
    pub fn keypoints(&self) -> Result<KeypointSet> {
        let mut points = Vec::with_capacity(KEYPOINT_COUNT);
        for pair in self.coords.chunks_exact(2) {
            let x = half_bits_to_f32(pair[0]);
            let y = half_bits_to_f32(pair[1]);
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Bitstream(
                    "non-finite keypoint coordinate in payload".into(),
                ));
            }
            points.push([x, y]);
        }
        KeypointSet::new(points)
            .map_err(|e| Error::Bitstream(format!("invalid decoded keypoints: {e}")))
    }
}

/// Encode keypoints into a frame payload (round-to-nearest-even binary16).
pub fn encode_frame(frame_index: u32, kp: &KeypointSet) -> Result<FramePayload> {
    if kp.len() != KEYPOINT_COUNT {
        return Err(Error::Bitstream(format!(
            "wire format carries {KEYPOINT_COUNT} keypoints, got {}",
            kp.len()
        )));
    }
    let mut coords = [0u16; KEYPOINT_COUNT * 2];
    for (i, p) in kp.points().iter().enumerate() {
        coords[2 * i] = f32_to_half_bits(p[0]);
        coords[2 * i + 1] = f32_to_half_bits(p[1]);
    }
    Ok(FramePayload {
        frame_index,
        coords,
    })
}

/// Decode a raw frame payload into keypoints.
pub fn decode_frame(bytes: &[u8]) -> Result<KeypointSet> {
    FramePayload::from_bytes(bytes)?.keypoints()
}

// --- session header --------------------------------------------------------

/// A source view carried once at session start: externally coded image bytes
/// with their declared bit cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceViewRecord {
    pub frame_index: u32,
    pub view_bits: u32,
    pub payload: Vec<u8>,
}

impl SourceViewRecord {
    pub fn new(frame_index: u32, view_bits: u32, payload: Vec<u8>) -> Result<Self> {
        let expected = (view_bits as usize).div_ceil(8);
        if payload.len() != expected {
            return Err(Error::Bitstream(format!(
                "view payload is {} bytes, expected ceil({view_bits}/8) = {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            frame_index,
            view_bits,
            payload,
        })
    }

    /// Wrap opaque coded bytes, declaring their full length in bits.
    pub fn from_bytes(frame_index: u32, payload: Vec<u8>) -> Self {
        Self {
            frame_index,
            view_bits: (payload.len() * 8) as u32,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionHeader {
    pub version: u16,
    pub views: Vec<SourceViewRecord>,
}

impl SessionHeader {
    pub fn new(views: Vec<SourceViewRecord>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Bitstream(
                "session needs at least one source view".into(),
            ));
        }
        if views.len() > u8::MAX as usize {
            return Err(Error::Bitstream("view count exceeds u8".into()));
        }
        Ok(Self {
            version: SESSION_VERSION,
            views,
        })
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io_err = |e| Error::Bitstream(format!("write failed: {e}"));
        w.write_all(SESSION_MAGIC).map_err(io_err)?;
        w.write_all(&self.version.to_le_bytes()).map_err(io_err)?;
        w.write_all(&[self.views.len() as u8]).map_err(io_err)?;
        for v in &self.views {
            w.write_all(&v.frame_index.to_le_bytes()).map_err(io_err)?;
            w.write_all(&v.view_bits.to_le_bytes()).map_err(io_err)?;
            w.write_all(&v.payload).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != SESSION_MAGIC {
            return Err(Error::Bitstream(format!(
                "bad magic {magic:?}, expected {SESSION_MAGIC:?}"
            )));
        }
        let mut vbuf = [0u8; 2];
        read_exact(&mut r, &mut vbuf, "version")?;
        let version = u16::from_le_bytes(vbuf);
        if version != SESSION_VERSION {
            return Err(Error::Bitstream(format!("unsupported version {version}")));
        }
        let mut kbuf = [0u8; 1];
        read_exact(&mut r, &mut kbuf, "view count")?;
        let k = kbuf[0] as usize;
        if k == 0 {
            return Err(Error::Bitstream("session declares zero views".into()));
        }
        let mut views = Vec::with_capacity(k);
        for _ in 0..k {
            let mut f = [0u8; 4];
            read_exact(&mut r, &mut f, "view frame index")?;
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "view bits")?;
            let view_bits = u32::from_le_bytes(b);
            let mut payload = vec![0u8; (view_bits as usize).div_ceil(8)];
            read_exact(&mut r, &mut payload, "view payload")?;
            views.push(SourceViewRecord {
                frame_index: u32::from_le_bytes(f),
                view_bits,
                payload,
            });
        }
        Ok(Self { version, views })
    }

    /// Exact encoded size in bits.
    pub fn stream_bits(&self) -> u64 {
        HEADER_FIXED_BITS
            + self
                .views
                .iter()
                .map(|v| VIEW_FIELD_BITS + 8 * (v.view_bits as u64).div_ceil(8))
                .sum::<u64>()
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Bitstream(format!("truncated while reading {what}")))
}

// --- rate ledger ------------------------------------------------------------

/// A mid-session source-view replacement and its transmission cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapEvent {
    pub frame_index: u32,
    pub view_bits: u64,
}

/// Per-session bit accounting. Coordinate bits and declared source-view
/// bits are pure payload; container overhead (magic, length fields, frame
/// indices, padding) is tracked separately.
#[derive(Debug, Clone, Default)]
pub struct RateLedger {
    pub source_view_bits: u64,
    pub container_overhead_bits: u64,
    pub per_frame_payload_bits: u64,
    pub frames_sent: u64,
    pub swap_events: Vec<SwapEvent>,
}

impl RateLedger {
    pub fn new() -> Self {
        Self {
            per_frame_payload_bits: COORD_BITS_PER_FRAME,
            ..Self::default()
        }
    }

    pub fn record_header(&mut self, header: &SessionHeader) {
        self.source_view_bits += header.views.iter().map(|v| v.view_bits as u64).sum::<u64>();
        self.container_overhead_bits +=
            header.stream_bits() - header.views.iter().map(|v| v.view_bits as u64).sum::<u64>();
    }

    pub fn record_frame(&mut self) {
        self.frames_sent += 1;
        self.container_overhead_bits += FRAME_INDEX_BITS;
    }

    pub fn record_swap(&mut self, frame_index: u32, view_bits: u64) {
        self.swap_events.push(SwapEvent {
            frame_index,
            view_bits,
        });
    }

    pub fn coordinate_bits(&self) -> u64 {
        self.frames_sent * self.per_frame_payload_bits
    }

    pub fn swap_bits(&self) -> u64 {
        self.swap_events.iter().map(|e| e.view_bits).sum()
    }

    /// Total bits of the emitted stream, equal to 8x its byte length.
    pub fn total_stream_bits(&self) -> u64 {
        self.source_view_bits + self.container_overhead_bits + self.coordinate_bits()
    }
}

/// Amortized rate after `n_frames`: one-time view and swap costs spread over
/// the per-frame coordinate payload. Returns (bits per frame, kbps).
pub fn amortized_rate(ledger: &RateLedger, n_frames: u64, fps: f64) -> Result<(f64, f64)> {
    if n_frames < 1 {
        return Err(Error::arg("amortization needs at least one frame"));
    }
    if fps.is_nan() || fps <= 0.0 {
        return Err(Error::arg("fps must be positive"));
    }
    let total =
        ledger.source_view_bits + ledger.swap_bits() + n_frames * ledger.per_frame_payload_bits;
    let bits_per_frame = total as f64 / n_frames as f64;
    let kbps = bits_per_frame * fps / 1000.0;
    Ok((bits_per_frame, kbps))
}

// --- whole-session encode/decode ---------------------------------------------

/// Write a full session and return the populated ledger.
pub fn write_session(
    mut w: impl Write,
    header: &SessionHeader,
    frames: &[(u32, KeypointSet)],
) -> Result<RateLedger> {
    let mut ledger = RateLedger::new();
    header.write_to(&mut w)?;
    ledger.record_header(header);
    for (frame_index, kp) in frames {
        let payload = encode_frame(*frame_index, kp)?;
        w.write_all(&payload.to_bytes())
            .map_err(|e| Error::Bitstream(format!("write failed: {e}")))?;
        ledger.record_frame();
    }
    Ok(ledger)
}

/// Incremental reader over a session stream.
pub struct SessionReader<R> {
    header: SessionHeader,
    reader: R,
}

impl<R: Read> SessionReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let header = SessionHeader::read_from(&mut reader)?;
        Ok(Self { header, reader })
    }

    pub fn header(&self) -> &SessionHeader {
        &self.header
    }

    /// Next frame payload; `None` at a clean end of stream.
    pub fn next_frame(&mut self) -> Option<Result<FramePayload>> {
        let mut buf = [0u8; FRAME_WIRE_BYTES];
        let mut filled = 0usize;
        while filled < buf.len() {
            match self.reader.read(&mut buf[filled..]) {
                Ok(0) => {
                    return if filled == 0 {
                        None
                    } else {
                        Some(Err(Error::Bitstream(format!(
                            "truncated frame payload ({filled} of {FRAME_WIRE_BYTES} bytes)"
                        ))))
                    };
                }
                Ok(n) => filled += n,
                Err(e) => return Some(Err(Error::Bitstream(format!("read failed: {e}")))),
            }
        }
        Some(FramePayload::from_bytes(&buf))
    }
}

/// Parse a whole session from a byte slice.
pub fn read_session(bytes: &[u8]) -> Result<(SessionHeader, Vec<FramePayload>)> {
    let mut reader = SessionReader::new(bytes)?;
    let mut frames = Vec::new();
    while let Some(frame) = reader.next_frame() {
        frames.push(frame?);
    }
    Ok((reader.header, frames))
}
