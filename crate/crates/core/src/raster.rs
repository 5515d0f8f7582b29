//! 8-bit grayscale rasters and binary PGM (P5) I/O.

use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with toroidal wraparound.
    #[inline]
    pub fn get_wrapped(&self, x: i64, y: i64) -> u8 {
        let xi = x.rem_euclid(self.width as i64) as usize;
        let yi = y.rem_euclid(self.height as i64) as usize;
        self.data[yi * self.width + xi]
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_pgm<R: BufRead>(mut r: R) -> io::Result<Self> {
        let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut fields = Vec::with_capacity(4);
        let mut token = Vec::new();
        let mut in_comment = false;
        while fields.len() < 4 {
            let mut byte = [0u8; 1];
            if r.read(&mut byte)? == 0 {
                return Err(invalid("truncated PGM header"));
            }
            let c = byte[0];
            if in_comment {
                in_comment = c != b'\n';
                continue;
            }
            if c == b'#' {
                in_comment = true;
            } else if c.is_ascii_whitespace() {
                if !token.is_empty() {
                    fields.push(String::from_utf8_lossy(&token).into_owned());
                    token.clear();
                }
            } else {
                token.push(c);
            }
        }
        if fields[0] != "P5" {
            return Err(invalid("not a binary PGM (P5)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| invalid("bad PGM header number"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(invalid("only 8-bit PGM (maxval 255) is supported"));
        }
        let mut data = vec![0u8; width * height];
        r.read_exact(&mut data)?;
        Ok(Self { width, height, data })
    }
}
