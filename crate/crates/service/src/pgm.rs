use std::io::Write;

use tab_core::metrics::Heatmap;

/// Binary (P5) PGM of the upsampled map. Values in `[0, 1]` map linearly to
/// `0..=255`; anything outside is clamped.
pub fn encode_heatmap(map: &Heatmap) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.upsampled.len() + 16);
    write!(out, "P5\n{} {}\n255\n", map.width, map.height).expect("writing to a Vec cannot fail");
    out.extend(map.upsampled.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Header fields and pixel bytes of a P5 file written by [`encode_heatmap`].
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let pixels = bytes.get(pos + 1..)?;
    (pixels.len() == w * h).then_some((w, h, pixels))
}
