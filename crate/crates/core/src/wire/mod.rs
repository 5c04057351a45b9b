//! Client/server wire protocol.
//!
//! Every message is a 16-byte little-endian header (`"CRWM"`, version, type,
//! body length) followed by the body.

pub mod codec;
mod pipe;
mod queue;

use std::io::{Read, Write};

use crate::camera::{CameraIntrinsics, ColorImage, DepthImage};
use crate::se3::{RigidTransform, POSE_BYTES};

pub use codec::{CodecError, DEFAULT_JPEG_QUALITY};
pub use pipe::{memory_pipe, PipeReader, PipeWriter};
pub use queue::{OverflowPolicy, PooledQueue, PopGuard, PushHandle, QueueCounters};

pub const MAGIC: [u8; 4] = *b"CRWM";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 16;
/// Upper bound on a message body, to reject corrupt length fields early.
pub const MAX_BODY_BYTES: u64 = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("truncated message at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("unknown message type {0} at byte 6")]
    UnknownType(u16),
    #[error("corrupt message at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum MessageType {
    Hello = 1,
    Frame = 2,
    RenderRequest = 3,
    RenderedImage = 4,
    Bye = 5,
}

impl MessageType {
    fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => Self::Hello,
            2 => Self::Frame,
            3 => Self::RenderRequest,
            4 => Self::RenderedImage,
            5 => Self::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub name: String,
    pub depth_intrinsics: CameraIntrinsics,
    pub color_intrinsics: CameraIntrinsics,
}

/// One tracked RGB-D frame with its local pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    pub frame_index: u64,
    pub local_pose: RigidTransform,
    pub depth_width: u32,
    pub depth_height: u32,
    pub color_width: u32,
    pub color_height: u32,
    pub depth_png: Vec<u8>,
    pub color_jpeg: Vec<u8>,
}

impl FrameMessage {
    pub fn encode(
        frame_index: u64,
        local_pose: &RigidTransform,
        depth: &DepthImage,
        color: &ColorImage,
        jpeg_quality: u8,
    ) -> Result<Self, CodecError> {
        Ok(Self {
            frame_index,
            local_pose: *local_pose,
            depth_width: depth.width as u32,
            depth_height: depth.height as u32,
            color_width: color.width as u32,
            color_height: color.height as u32,
            depth_png: codec::encode_depth_png(depth)?,
            color_jpeg: codec::encode_color_jpeg(color, jpeg_quality)?,
        })
    }

    pub fn depth(&self) -> Result<DepthImage, CodecError> {
        let d = codec::decode_depth_png(&self.depth_png)?;
        check_size(d.width, d.height, self.depth_width, self.depth_height)?;
        Ok(d)
    }

    pub fn color(&self) -> Result<ColorImage, CodecError> {
        let c = codec::decode_color_jpeg(&self.color_jpeg)?;
        check_size(c.width, c.height, self.color_width, self.color_height)?;
        Ok(c)
    }

    /// Size of the uncompressed 16-bit depth and 8-bit RGB images.
    pub fn raw_bytes(&self) -> usize {
        (self.depth_width * self.depth_height) as usize * 2
            + (self.color_width * self.color_height) as usize * 3
    }
}

fn check_size(w: usize, h: usize, want_w: u32, want_h: u32) -> Result<(), CodecError> {
    if w as u32 != want_w || h as u32 != want_h {
        return Err(CodecError::Size {
            got_w: w as u32,
            got_h: h as u32,
            want_w,
            want_h,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderRequest {
    pub client_id: u32,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub client_id: u32,
    pub pose: RigidTransform,
    pub width: u32,
    pub height: u32,
    pub jpeg: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Frame(FrameMessage),
    RenderRequest(RenderRequest),
    RenderedImage(RenderedImage),
    Bye,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::Frame(_) => MessageType::Frame,
            Message::RenderRequest(_) => MessageType::RenderRequest,
            Message::RenderedImage(_) => MessageType::RenderedImage,
            Message::Bye => MessageType::Bye,
        }
    }

    fn encode_body(&self, out: &mut Vec<u8>) {
        match self {
            Message::Hello(h) => {
                put_intrinsics(out, &h.depth_intrinsics);
                put_intrinsics(out, &h.color_intrinsics);
                out.extend_from_slice(h.name.as_bytes());
            }
            Message::Frame(f) => {
                out.extend_from_slice(&f.frame_index.to_le_bytes());
                out.extend_from_slice(&f.local_pose.to_le_bytes());
                for v in [f.depth_width, f.depth_height, f.color_width, f.color_height] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(f.depth_png.len() as u32).to_le_bytes());
                out.extend_from_slice(&(f.color_jpeg.len() as u32).to_le_bytes());
                out.extend_from_slice(&f.depth_png);
                out.extend_from_slice(&f.color_jpeg);
            }
            Message::RenderRequest(r) => {
                out.extend_from_slice(&r.client_id.to_le_bytes());
                out.extend_from_slice(&r.pose.to_le_bytes());
            }
            Message::RenderedImage(r) => {
                out.extend_from_slice(&r.client_id.to_le_bytes());
                out.extend_from_slice(&r.pose.to_le_bytes());
                out.extend_from_slice(&r.width.to_le_bytes());
                out.extend_from_slice(&r.height.to_le_bytes());
                out.extend_from_slice(&r.jpeg);
            }
            Message::Bye => {}
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        self.encode_body(&mut body);
        let mut out = Vec::with_capacity(HEADER_BYTES + body.len());
        out.extend_from_slice(&header(self.message_type(), body.len() as u64));
        out.extend_from_slice(&body);
        out
    }

    /// Decodes one message from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Message, usize), WireError> {
        let (ty, len) = parse_header(bytes)?;
        let end = HEADER_BYTES
            .checked_add(len)
            .ok_or_else(|| WireError::Corrupt {
                offset: 8,
                reason: "body length overflows".into(),
            })?;
        if bytes.len() < end {
            return Err(WireError::Truncated {
                offset: bytes.len(),
                needed: end - bytes.len(),
            });
        }
        let msg = decode_body(ty, &bytes[HEADER_BYTES..end])?;
        Ok((msg, end))
    }
}

fn header(ty: MessageType, body_len: u64) -> [u8; HEADER_BYTES] {
    let mut h = [0u8; HEADER_BYTES];
    h[..4].copy_from_slice(&MAGIC);
    h[4..6].copy_from_slice(&VERSION.to_le_bytes());
    h[6..8].copy_from_slice(&(ty as u16).to_le_bytes());
    h[8..16].copy_from_slice(&body_len.to_le_bytes());
    h
}

fn parse_header(bytes: &[u8]) -> Result<(MessageType, usize), WireError> {
    if bytes.len() < HEADER_BYTES {
        return Err(WireError::Truncated {
            offset: bytes.len(),
            needed: HEADER_BYTES - bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(WireError::Version(version));
    }
    let raw_ty = u16::from_le_bytes([bytes[6], bytes[7]]);
    let ty = MessageType::from_u16(raw_ty).ok_or(WireError::UnknownType(raw_ty))?;
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > MAX_BODY_BYTES {
        return Err(WireError::Corrupt {
            offset: 8,
            reason: format!("body length {len} exceeds limit"),
        });
    }
    Ok((ty, len as usize))
}

fn put_intrinsics(out: &mut Vec<u8>, k: &CameraIntrinsics) {
    for v in [k.fx, k.fy, k.cx, k.cy] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(k.width as u32).to_le_bytes());
    out.extend_from_slice(&(k.height as u32).to_le_bytes());
}

/// Bounds-checked reader over a message body; offsets are reported relative
/// to the start of the whole message.
struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn offset(&self) -> usize {
        HEADER_BYTES + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                offset: self.offset(),
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn pose(&mut self) -> Result<RigidTransform, WireError> {
        let at = self.offset();
        let b: &[u8; POSE_BYTES] = self.take(POSE_BYTES)?.try_into().expect("pose bytes");
        RigidTransform::from_le_bytes(b).map_err(|e| WireError::Corrupt {
            offset: at,
            reason: e.to_string(),
        })
    }

    fn intrinsics(&mut self) -> Result<CameraIntrinsics, WireError> {
        let at = self.offset();
        let (fx, fy, cx, cy) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let (w, h) = (self.u32()? as usize, self.u32()? as usize);
        CameraIntrinsics::new(fx, fy, cx, cy, w, h).map_err(|e| WireError::Corrupt {
            offset: at,
            reason: e.to_string(),
        })
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Corrupt {
                offset: self.offset(),
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn decode_body(ty: MessageType, body: &[u8]) -> Result<Message, WireError> {
    let mut r = BodyReader { buf: body, pos: 0 };
    let msg = match ty {
        MessageType::Hello => {
            let depth_intrinsics = r.intrinsics()?;
            let color_intrinsics = r.intrinsics()?;
            let at = r.offset();
            let name = std::str::from_utf8(r.rest())
                .map_err(|e| WireError::Corrupt {
                    offset: at,
                    reason: e.to_string(),
                })?
                .to_string();
            Message::Hello(Hello {
                name,
                depth_intrinsics,
                color_intrinsics,
            })
        }
        MessageType::Frame => {
            let frame_index = r.u64()?;
            let local_pose = r.pose()?;
            let (depth_width, depth_height) = (r.u32()?, r.u32()?);
            let (color_width, color_height) = (r.u32()?, r.u32()?);
            let (dl, cl) = (r.u32()? as usize, r.u32()? as usize);
            let depth_png = r.take(dl)?.to_vec();
            let color_jpeg = r.take(cl)?.to_vec();
            Message::Frame(FrameMessage {
                frame_index,
                local_pose,
                depth_width,
                depth_height,
                color_width,
                color_height,
                depth_png,
                color_jpeg,
            })
        }
        MessageType::RenderRequest => Message::RenderRequest(RenderRequest {
            client_id: r.u32()?,
            pose: r.pose()?,
        }),
        MessageType::RenderedImage => {
            let client_id = r.u32()?;
            let pose = r.pose()?;
            let (width, height) = (r.u32()?, r.u32()?);
            Message::RenderedImage(RenderedImage {
                client_id,
                pose,
                width,
                height,
                jpeg: r.rest().to_vec(),
            })
        }
        MessageType::Bye => Message::Bye,
    };
    r.finish()?;
    Ok(msg)
}

/// Encodes a frame into a complete framed message.
pub fn encode_frame(
    frame_index: u64,
    pose: &RigidTransform,
    depth: &DepthImage,
    color: &ColorImage,
    jpeg_quality: u8,
) -> Result<Vec<u8>, WireError> {
    let msg = FrameMessage::encode(frame_index, pose, depth, color, jpeg_quality)?;
    Ok(Message::Frame(msg).to_bytes())
}

pub fn decode_frame(bytes: &[u8]) -> Result<FrameMessage, WireError> {
    match Message::from_bytes(bytes)? {
        (Message::Frame(f), n) if n == bytes.len() => Ok(f),
        (Message::Frame(_), n) => Err(WireError::Corrupt {
            offset: n,
            reason: "trailing bytes after frame".into(),
        }),
        (other, _) => Err(WireError::Corrupt {
            offset: 6,
            reason: format!("expected a frame, got {:?}", other.message_type()),
        }),
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&msg.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads one message; `Ok(None)` on a clean end of stream before a header.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut head = [0u8; HEADER_BYTES];
    let mut got = 0;
    while got < HEADER_BYTES {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    offset: got,
                    needed: HEADER_BYTES - got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (ty, len) = parse_header(&head)?;
    let mut body = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match r.read(&mut body[filled..]) {
            Ok(0) => {
                return Err(WireError::Truncated {
                    offset: HEADER_BYTES + filled,
                    needed: len - filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    decode_body(ty, &body).map(Some)
}
