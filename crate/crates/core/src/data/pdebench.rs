//! Import and export of PDEBench-style HDF5 files for 2-D compressible flow.
//!
//! A file holds `density`, `pressure`, `Vx` and `Vy`, each shaped
//! `(samples, frames, nx, ny)`, plus an optional `t-coordinate`. Reading and
//! writing need the `hdf5` feature; the array conversions below do not.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{ConservedState, Grid2D, PrimitiveState, Trajectory};

pub const DATASETS: [&str; 4] = ["density", "pressure", "Vx", "Vy"];
pub const TIME_DATASET: &str = "t-coordinate";

/// Raw arrays of a PDEBench file, all row-major `(n, t, nx, ny)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeBenchArrays {
    pub n: usize,
    pub t: usize,
    pub nx: usize,
    pub ny: usize,
    pub density: Vec<f64>,
    pub pressure: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub t_coord: Option<Vec<f64>>,
}

impl PdeBenchArrays {
    fn frame_len(&self) -> usize {
        self.nx * self.ny
    }

    fn check(&self) -> Result<()> {
        let len = self.n * self.t * self.frame_len();
        for (name, v) in DATASETS.iter().zip([&self.density, &self.pressure, &self.vx, &self.vy]) {
            if v.len() != len {
                return Err(Error::format(*name, format!("{} values, expected {len}", v.len())));
            }
        }
        Ok(())
    }

    fn frame<'a>(&self, v: &'a [f64], sample: usize, frame: usize) -> &'a [f64] {
        let fl = self.frame_len();
        let start = (sample * self.t + frame) * fl;
        &v[start..start + fl]
    }

    /// Frame spacing from `t-coordinate`, or 1 when absent.
    pub fn dt(&self) -> f64 {
        match &self.t_coord {
            Some(t) if t.len() >= 2 => t[1] - t[0],
            _ => 1.0,
        }
    }
}

/// Keeps every `nx/tx`-th row and `ny/ty`-th column of a row-major field.
pub fn downsample(values: &[f64], nx: usize, ny: usize, tx: usize, ty: usize) -> Result<Vec<f64>> {
    if tx == 0 || ty == 0 || nx % tx != 0 || ny % ty != 0 {
        return Err(Error::config(
            "data.downsample",
            format!("{nx}x{ny} is not an integer multiple of {tx}x{ty}"),
        ));
    }
    let (sx, sy) = (nx / tx, ny / ty);
    Ok((0..tx)
        .flat_map(|i| (0..ty).map(move |j| (i * sx) * ny + j * sy))
        .map(|k| values[k])
        .collect())
}

/// Converts arrays to conserved trajectories on a domain of size `lx x ly`,
/// optionally downsampled to `target`.
pub fn arrays_to_trajectories(
    arrays: &PdeBenchArrays,
    target: Option<(usize, usize)>,
    lx: f64,
    ly: f64,
) -> Result<Vec<Trajectory<ConservedState>>> {
    arrays.check()?;
    let (tx, ty) = target.unwrap_or((arrays.nx, arrays.ny));
    let grid = Grid2D::new(tx, ty, lx, ly)?;
    let dt = arrays.dt();
    (0..arrays.n)
        .map(|s| {
            let states = (0..arrays.t)
                .map(|f| {
                    let take = |v: &[f64]| downsample(arrays.frame(v, s, f), arrays.nx, arrays.ny, tx, ty);
                    PrimitiveState::new(
                        grid,
                        take(&arrays.density)?,
                        take(&arrays.pressure)?,
                        [take(&arrays.vx)?, take(&arrays.vy)?],
                    )
                    .map_err(|e| Error::format(format!("sample {s} frame {f}"), e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Trajectory::new(dt, states)?.to_conserved()
        })
        .collect()
}

/// Packs primitive trajectories (equal shapes) into PDEBench arrays.
pub fn trajectories_to_arrays(trajs: &[Trajectory<PrimitiveState>]) -> Result<PdeBenchArrays> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Empty("no trajectories to export".into()))?;
    let (t, grid) = (first.len(), first.states[0].grid);
    let mut out = PdeBenchArrays {
        n: trajs.len(),
        t,
        nx: grid.nx,
        ny: grid.ny,
        density: Vec::new(),
        pressure: Vec::new(),
        vx: Vec::new(),
        vy: Vec::new(),
        t_coord: Some((0..t).map(|k| k as f64 * first.dt).collect()),
    };
    for (i, traj) in trajs.iter().enumerate() {
        if traj.len() != t || traj.states[0].grid != grid {
            return Err(Error::Shape(format!("trajectory {i} differs in length or grid")));
        }
        for s in &traj.states {
            out.density.extend_from_slice(&s.rho);
            out.pressure.extend_from_slice(&s.p);
            out.vx.extend_from_slice(&s.u[0]);
            out.vy.extend_from_slice(&s.u[1]);
        }
    }
    Ok(out)
}

/// Reads samples `samples` of a PDEBench file.
pub fn read_pdebench(path: &Path, samples: std::ops::Range<usize>) -> Result<PdeBenchArrays> {
    imp::read(path, samples)
}

pub fn write_pdebench(path: &Path, arrays: &PdeBenchArrays) -> Result<()> {
    arrays.check()?;
    imp::write(path, arrays)
}

/// Reads, converts and optionally downsamples in one call.
pub fn load_pdebench(
    path: &Path,
    samples: std::ops::Range<usize>,
    target: Option<(usize, usize)>,
) -> Result<Vec<Trajectory<ConservedState>>> {
    arrays_to_trajectories(&read_pdebench(path, samples)?, target, 1.0, 1.0)
}

#[cfg(not(feature = "hdf5"))]
mod imp {
    use super::*;

    fn disabled() -> Error {
        Error::config("data.pdebench", "built without the `hdf5` feature")
    }

    pub fn read(_: &Path, _: std::ops::Range<usize>) -> Result<PdeBenchArrays> {
        Err(disabled())
    }

    pub fn write(_: &Path, _: &PdeBenchArrays) -> Result<()> {
        Err(disabled())
    }
}

#[cfg(feature = "hdf5")]
mod imp {
    use std::ffi::CString;
    use std::os::raw::{c_char, c_int, c_uint, c_void};

    use super::*;

    #[allow(non_camel_case_types)]
    type hid_t = i64;
    #[allow(non_camel_case_types)]
    type herr_t = i32;
    #[allow(non_camel_case_types)]
    type hsize_t = u64;

    const H5F_ACC_RDONLY: c_uint = 0;
    const H5F_ACC_TRUNC: c_uint = 2;
    const H5P_DEFAULT: hid_t = 0;
    const H5S_ALL: hid_t = 0;
    const H5S_SELECT_SET: c_int = 0;

    #[link(name = "hdf5_serial")]
    extern "C" {
        fn H5open() -> herr_t;
        static H5T_NATIVE_DOUBLE_g: hid_t;
        fn H5Eset_auto2(stack: hid_t, func: *const c_void, data: *mut c_void) -> herr_t;
        fn H5Eclear2(stack: hid_t) -> herr_t;
        fn H5Fopen(name: *const c_char, flags: c_uint, fapl: hid_t) -> hid_t;
        fn H5Fcreate(name: *const c_char, flags: c_uint, fcpl: hid_t, fapl: hid_t) -> hid_t;
        fn H5Fclose(id: hid_t) -> herr_t;
        fn H5Lexists(loc: hid_t, name: *const c_char, lapl: hid_t) -> c_int;
        fn H5Dopen2(loc: hid_t, name: *const c_char, dapl: hid_t) -> hid_t;
        fn H5Dcreate2(
            loc: hid_t,
            name: *const c_char,
            dtype: hid_t,
            space: hid_t,
            lcpl: hid_t,
            dcpl: hid_t,
            dapl: hid_t,
        ) -> hid_t;
        fn H5Dget_space(id: hid_t) -> hid_t;
        fn H5Dread(d: hid_t, mem_t: hid_t, mem_s: hid_t, file_s: hid_t, xfer: hid_t, buf: *mut c_void) -> herr_t;
        fn H5Dwrite(d: hid_t, mem_t: hid_t, mem_s: hid_t, file_s: hid_t, xfer: hid_t, buf: *const c_void)
            -> herr_t;
        fn H5Dclose(id: hid_t) -> herr_t;
        fn H5Sget_simple_extent_ndims(id: hid_t) -> c_int;
        fn H5Sget_simple_extent_dims(id: hid_t, dims: *mut hsize_t, max: *mut hsize_t) -> c_int;
        fn H5Screate_simple(rank: c_int, dims: *const hsize_t, max: *const hsize_t) -> hid_t;
        fn H5Sselect_hyperslab(
            space: hid_t,
            op: c_int,
            start: *const hsize_t,
            stride: *const hsize_t,
            count: *const hsize_t,
            block: *const hsize_t,
        ) -> herr_t;
        fn H5Sclose(id: hid_t) -> herr_t;
    }

    /// The serial library build is not thread-safe.
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

    /// Closes an HDF5 handle on drop.
    struct Handle(hid_t, unsafe extern "C" fn(hid_t) -> herr_t);

    impl Drop for Handle {
        fn drop(&mut self) {
            unsafe {
                (self.1)(self.0);
            }
        }
    }

    fn init() -> Result<hid_t> {
        unsafe {
            if H5open() < 0 {
                return Err(Error::format("hdf5", "library initialisation failed"));
            }
            H5Eset_auto2(0, std::ptr::null(), std::ptr::null_mut());
            Ok(H5T_NATIVE_DOUBLE_g)
        }
    }

    fn cstr(s: &str) -> CString {
        CString::new(s).expect("dataset names contain no NUL")
    }

    fn check(id: hid_t, what: impl FnOnce() -> String) -> Result<hid_t> {
        if id < 0 {
            Err(Error::format("hdf5", what()))
        } else {
            Ok(id)
        }
    }

    fn dims(space: hid_t) -> Result<Vec<usize>> {
        unsafe {
            let rank = H5Sget_simple_extent_ndims(space);
            check(rank as hid_t, || "cannot query rank".into())?;
            let mut d = vec![0 as hsize_t; rank as usize];
            H5Sget_simple_extent_dims(space, d.as_mut_ptr(), std::ptr::null_mut());
            Ok(d.into_iter().map(|v| v as usize).collect())
        }
    }

    fn read_block(file: hid_t, name: &str, samples: &std::ops::Range<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        let double = init()?;
        unsafe {
            let ds = Handle(
                check(H5Dopen2(file, cstr(name).as_ptr(), H5P_DEFAULT), || format!("missing dataset `{name}`"))?,
                H5Dclose,
            );
            let space = Handle(check(H5Dget_space(ds.0), || format!("`{name}` has no dataspace"))?, H5Sclose);
            let shape = dims(space.0)?;
            if shape.len() != 4 {
                return Err(Error::format(name, format!("rank {} array, expected 4", shape.len())));
            }
            if samples.end > shape[0] || samples.is_empty() {
                return Err(Error::format(
                    name,
                    format!("sample range {samples:?} outside 0..{}", shape[0]),
                ));
            }
            let start: [hsize_t; 4] = [samples.start as hsize_t, 0, 0, 0];
            let count: [hsize_t; 4] = [samples.len() as hsize_t, shape[1] as hsize_t, shape[2] as hsize_t, shape[3] as hsize_t];
            check(
                H5Sselect_hyperslab(space.0, H5S_SELECT_SET, start.as_ptr(), std::ptr::null(), count.as_ptr(), std::ptr::null())
                    as hid_t,
                || format!("cannot select samples of `{name}`"),
            )?;
            let mem = Handle(check(H5Screate_simple(4, count.as_ptr(), std::ptr::null()), || "memory space".into())?, H5Sclose);
            let mut buf = vec![0.0f64; count.iter().product::<hsize_t>() as usize];
            check(
                H5Dread(ds.0, double, mem.0, space.0, H5P_DEFAULT, buf.as_mut_ptr() as *mut c_void) as hid_t,
                || format!("reading `{name}` failed"),
            )?;
            let mut shape = shape;
            shape[0] = samples.len();
            Ok((shape, buf))
        }
    }

    /// Runs `f` under the library lock and clears the error stack afterwards;
    /// a non-empty stack at process exit makes the library loop on shutdown.
    fn locked<R>(f: impl FnOnce() -> Result<R>) -> Result<R> {
        let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let out = f();
        unsafe {
            H5Eclear2(0);
        }
        out
    }

    pub fn read(path: &Path, samples: std::ops::Range<usize>) -> Result<PdeBenchArrays> {
        locked(|| read_unlocked(path, samples))
    }

    fn read_unlocked(path: &Path, samples: std::ops::Range<usize>) -> Result<PdeBenchArrays> {
        init()?;
        let name = cstr(&path.to_string_lossy());
        let file = unsafe {
            Handle(
                check(H5Fopen(name.as_ptr(), H5F_ACC_RDONLY, H5P_DEFAULT), || {
                    format!("cannot open {}", path.display())
                })?,
                H5Fclose,
            )
        };
        let mut parts = Vec::new();
        let mut shape = Vec::new();
        for ds in DATASETS {
            let (s, v) = read_block(file.0, ds, &samples)?;
            if !shape.is_empty() && s != shape {
                return Err(Error::format(ds, format!("shape {s:?} differs from {shape:?}")));
            }
            shape = s;
            parts.push(v);
        }
        let t_coord = unsafe {
            if H5Lexists(file.0, cstr(TIME_DATASET).as_ptr(), H5P_DEFAULT) > 0 {
                let ds = Handle(check(H5Dopen2(file.0, cstr(TIME_DATASET).as_ptr(), H5P_DEFAULT), || "t-coordinate".into())?, H5Dclose);
                let space = Handle(check(H5Dget_space(ds.0), || "t-coordinate space".into())?, H5Sclose);
                let n: usize = dims(space.0)?.iter().product();
                let mut buf = vec![0.0f64; n];
                check(
                    H5Dread(ds.0, H5T_NATIVE_DOUBLE_g, H5S_ALL, H5S_ALL, H5P_DEFAULT, buf.as_mut_ptr() as *mut c_void) as hid_t,
                    || "reading t-coordinate failed".into(),
                )?;
                Some(buf)
            } else {
                None
            }
        };
        let mut it = parts.into_iter();
        Ok(PdeBenchArrays {
            n: shape[0],
            t: shape[1],
            nx: shape[2],
            ny: shape[3],
            density: it.next().unwrap(),
            pressure: it.next().unwrap(),
            vx: it.next().unwrap(),
            vy: it.next().unwrap(),
            t_coord,
        })
    }

    fn write_array(file: hid_t, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let double = init()?;
        let d: Vec<hsize_t> = shape.iter().map(|&v| v as hsize_t).collect();
        unsafe {
            let space = Handle(check(H5Screate_simple(d.len() as c_int, d.as_ptr(), std::ptr::null()), || "dataspace".into())?, H5Sclose);
            let ds = Handle(
                check(
                    H5Dcreate2(file, cstr(name).as_ptr(), double, space.0, H5P_DEFAULT, H5P_DEFAULT, H5P_DEFAULT),
                    || format!("cannot create `{name}`"),
                )?,
                H5Dclose,
            );
            check(
                H5Dwrite(ds.0, double, H5S_ALL, H5S_ALL, H5P_DEFAULT, data.as_ptr() as *const c_void) as hid_t,
                || format!("writing `{name}` failed"),
            )?;
        }
        Ok(())
    }

    pub fn write(path: &Path, a: &PdeBenchArrays) -> Result<()> {
        locked(|| write_unlocked(path, a))
    }

    fn write_unlocked(path: &Path, a: &PdeBenchArrays) -> Result<()> {
        init()?;
        let name = cstr(&path.to_string_lossy());
        let file = unsafe {
            Handle(
                check(H5Fcreate(name.as_ptr(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT), || {
                    format!("cannot create {}", path.display())
                })?,
                H5Fclose,
            )
        };
        let shape = [a.n, a.t, a.nx, a.ny];
        for (ds, v) in DATASETS.iter().zip([&a.density, &a.pressure, &a.vx, &a.vy]) {
            write_array(file.0, ds, &shape, v)?;
        }
        if let Some(t) = &a.t_coord {
            write_array(file.0, TIME_DATASET, &[t.len()], t)?;
        }
        Ok(())
    }
}
