//! File formats: sequence directories, ground-truth and result files,
//! flat `key = value` configs, overlays and network checkpoints.
//!
//! Box files use a 1-based pixel origin; boxes in memory are 0-based.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Frame};
use crate::model::{MDNet, MDNetConfig, Mode};
use crate::tensor::{ParamGroup, Tensor};

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `x y w h` lines separated by commas, tabs or spaces. `path` only
/// labels errors.
pub fn parse_groundtruth_str(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.len() != 4 {
            return Err(parse_error(path, i + 1, format!("expected 4 values, found {}", tokens.len())));
        }
        let mut v = [0.0; 4];
        for (slot, tok) in v.iter_mut().zip(&tokens) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_error(path, i + 1, format!("not a number: {tok:?}")))?;
        }
        let b = BoundingBox::new(v[0] - 1.0, v[1] - 1.0, v[2], v[3])
            .map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn parse_groundtruth(path: &Path) -> Result<Vec<BoundingBox>> {
    parse_groundtruth_str(&fs::read_to_string(path)?, path)
}

/// One `x,y,w,h` line per box with two decimals, 1-based origin.
pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    let mut s = String::with_capacity(boxes.len() * 32);
    for b in boxes {
        s.push_str(&format!("{:.2},{:.2},{:.2},{:.2}\n", b.x + 1.0, b.y + 1.0, b.w, b.h));
    }
    s
}

pub fn write_results(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes))?;
    Ok(())
}

/// `key = value` pairs in file order. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_error(path, i + 1, "expected key = value"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(parse_error(path, i + 1, "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Frame::new(w as usize, h as usize, img.into_raw())
}

pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, frame.data().to_vec())
        .ok_or_else(|| Error::input("frame buffer does not match its size"))?;
    img.save(path)?;
    Ok(())
}

pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";
pub const IMAGE_DIR: &str = "img";

/// Frame files of a sequence directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join(IMAGE_DIR);
    let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::input(format!("no PNG or PPM frames in {}", img_dir.display())));
    }
    Ok(files)
}

/// Loads all frames and ground truth of a sequence directory.
pub fn load_sequence(dir: &Path) -> Result<(Vec<Frame>, Vec<BoundingBox>)> {
    let files = list_frames(dir)?;
    let gt = parse_groundtruth(&dir.join(GROUNDTRUTH_FILE))?;
    if gt.len() != files.len() {
        return Err(Error::input(format!(
            "{}: {} frames but {} ground-truth lines",
            dir.display(),
            files.len(),
            gt.len()
        )));
    }
    let frames = files.iter().map(|p| load_frame(p)).collect::<Result<_>>()?;
    Ok((frames, gt))
}

/// Writes `img/0001.png, …` and the ground-truth file.
pub fn save_sequence(dir: &Path, frames: &[Frame], gt: &[BoundingBox]) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir)?;
    for (i, f) in frames.iter().enumerate() {
        save_frame(f, &img_dir.join(format!("{:04}.png", i + 1)))?;
    }
    fs::write(dir.join(GROUNDTRUTH_FILE), format_boxes(gt))?;
    Ok(())
}

/// Copy of `frame` with the box outline drawn in `color`.
pub fn draw_box(frame: &Frame, b: &BoundingBox, color: [u8; 3]) -> Frame {
    let mut out = frame.clone();
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let x0 = b.x.round() as i64;
    let y0 = b.y.round() as i64;
    let x1 = b.right().round() as i64 - 1;
    let y1 = b.bottom().round() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.set_pixel(x as usize, y as usize, color);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDNC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_group(out: &mut Vec<u8>, g: &ParamGroup) {
    put_u32(out, g.name.len() as u32);
    out.extend_from_slice(g.name.as_bytes());
    let dims = g.weights.dims();
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in g.weights.data().iter().chain(g.bias.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the network. Layout, all little-endian:
///
/// ```text
/// "MDNC" | version u32 | input_size u32 | channel_scale f64 | domains u32
///        | lrn u8 | mode u8 | records u32
/// record: name_len u32 | name | rank u32 | dims u32×rank | weights f32… | bias f32×dims[0]
/// ```
pub fn checkpoint_bytes(net: &MDNet) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, cfg.input_size as u32);
    out.extend_from_slice(&cfg.channel_scale.to_le_bytes());
    put_u32(&mut out, cfg.num_domains as u32);
    out.push(cfg.lrn_enabled as u8);
    out.push(match net.mode() {
        Mode::Pretrain => 0,
        Mode::Online => 1,
    });
    let groups: Vec<&ParamGroup> = net.groups().collect();
    put_u32(&mut out, groups.len() as u32);
    for g in groups {
        put_group(&mut out, g);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn group(&mut self) -> Result<ParamGroup> {
        let len = self.u32("name length")? as usize;
        let name = String::from_utf8(self.take(len, "layer name")?.to_vec())
            .map_err(|_| Error::Checkpoint("layer name is not UTF-8".into()))?;
        let rank = self.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
        let weights = Tensor::new(&dims, self.f32s(n, &name)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bias = Tensor::new(&[dims[0]], self.f32s(dims[0], &name)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        ParamGroup::new(name, weights, bias).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MDNet> {
    let mut r = Reader { buf: bytes };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let input_size = r.u32("input size")? as usize;
    let scale = r.f64("channel scale")?;
    let domains = r.u32("domain count")? as usize;
    let lrn = r.u8("lrn flag")? != 0;
    let mode = match r.u8("mode")? {
        0 => Mode::Pretrain,
        1 => Mode::Online,
        m => return Err(Error::Checkpoint(format!("unknown mode {m}"))),
    };
    let mut config = MDNetConfig::scaled(domains, scale, lrn)?;
    config.input_size = input_size;
    config.validate()?;
    let count = r.u32("record count")? as usize;
    if count < 6 {
        return Err(Error::Checkpoint(format!("{count} layer records, need at least 6")));
    }
    let mut groups = (0..count).map(|_| r.group()).collect::<Result<Vec<_>>>()?;
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    let branches = groups.split_off(5);
    MDNet::from_parts(config, mode, groups, branches)
}

pub fn save_checkpoint(net: &MDNet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MDNet> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groundtruth_separators_and_origin() {
        let p = Path::new("gt.txt");
        let a = parse_groundtruth_str("10,20,30,40\n", p).unwrap();
        assert_eq!(a, vec![BoundingBox::new(9.0, 19.0, 30.0, 40.0).unwrap()]);
        assert_eq!(parse_groundtruth_str("10\t20\t30\t40", p).unwrap(), a);
        assert_eq!(parse_groundtruth_str("10 20  30 40", p).unwrap(), a);
    }

    #[test]
    fn malformed_line_is_located() {
        let err = parse_groundtruth_str("1,2,3,4\n1,2,3,4\n1,2,x,4\n", Path::new("g")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_groundtruth_str("1,2,3\n", Path::new("g")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn results_round_trip_through_parser() {
        let b = vec![BoundingBox::new(9.0, 19.5, 30.25, 40.0).unwrap()];
        let text = format_boxes(&b);
        assert_eq!(text, "10.00,20.50,30.25,40.00\n");
        assert_eq!(parse_groundtruth_str(&text, Path::new("r")).unwrap(), b);
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\nframes = 10\n\nseed=3 # note\n", Path::new("k")).unwrap();
        assert_eq!(kv, vec![("frames".into(), "10".into()), ("seed".into(), "3".into())]);
        assert!(parse_key_values("oops\n", Path::new("k")).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MDNet::new(MDNetConfig::scaled(3, 1.0 / 16.0, false).unwrap(), &mut rng).unwrap();
        let bytes = checkpoint_bytes(&net);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.num_branches(), 3);
        for (a, b) in net.groups().zip(back.groups()) {
            let bits = |g: &ParamGroup| -> Vec<u32> {
                g.weights.data().iter().chain(g.bias.data()).map(|v| v.to_bits()).collect()
            };
            assert_eq!(bits(a), bits(b));
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(checkpoint_from_bytes(&v2), Err(Error::UnsupportedVersion(2))));
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn outline_stays_in_bounds() {
        let f = Frame::filled(10, 10, [0, 0, 0]);
        let o = draw_box(&f, &BoundingBox::new(-3.0, 2.0, 8.0, 20.0).unwrap(), [255, 0, 0]);
        assert_eq!(o.pixel(4, 2), [255, 0, 0]);
        assert_eq!(o.pixel(2, 5), [0, 0, 0]);
    }
}
