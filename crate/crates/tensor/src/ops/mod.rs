mod elementwise;
mod linalg;
mod reduce;
mod shape;
mod spatial;
